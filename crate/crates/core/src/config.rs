//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments to
//! the same key win, which is how command-line overrides are layered on top
//! of a file.

use std::fmt::Display;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {msg}")]
    Value {
        key: String,
        value: String,
        msg: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// A configuration struct addressable by flat string keys.
pub trait KeyValue {
    /// Assigns one field from its textual value.
    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError>;

    /// All fields as `(key, value)` pairs; feeding them back through
    /// [`KeyValue::set`] reproduces the value exactly.
    fn entries(&self) -> Vec<(String, String)>;

    /// Checks cross-field invariants.
    fn validate(&self) -> Result<(), ConfigError>;

    /// Applies `(key, value)` pairs in order, then validates.
    fn apply<'a>(
        &mut self,
        pairs: impl IntoIterator<Item = &'a (String, String)>,
    ) -> Result<(), ConfigError> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        self.validate()
    }

    fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Splits configuration text into `(key, value)` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                out.push((k.trim().to_string(), v.trim().to_string()));
            }
            _ => {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Parses a single `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    parse_pairs(s)?
        .pop()
        .ok_or_else(|| ConfigError::Syntax {
            line: 1,
            text: s.to_string(),
        })
}

pub fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: Display,
{
    value.parse().map_err(|e: V::Err| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        msg: e.to_string(),
    })
}

/// Comma separated list, e.g. `8,16,24`.
pub fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>, ConfigError>
where
    V::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|t| parse_value(key, t.trim())).collect()
}

pub fn format_list<V: Display>(items: &[V]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
