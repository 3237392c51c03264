//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KNET"                magic
//! u16                   format version
//! u32 + bytes           configuration as `key = value` text
//! u32                   tensor count
//! per tensor:
//!   u16 + bytes         name
//!   u8                  rank
//!   u32 * rank          dims
//!   f32 * prod(dims)    data
//! ```
//!
//! The configuration block holds the network configuration followed by
//! optional metadata whose keys contain a dot (`train.epoch = 3`). Tensors
//! that are not part of the network layout (optimizer state) are kept as
//! extras.

use std::fs;
use std::path::Path;

use super::{tensor_layout, KeyNetConfig, KeyNetWeights};
use crate::config::{parse_pairs, ConfigError, KeyValue};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KNET";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (this build reads version {CHECKPOINT_VERSION})")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is inconsistent: {0}")]
    Inconsistent(String),
    #[error("checkpoint configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything stored in one file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: KeyNetConfig,
    pub weights: KeyNetWeights<f32>,
    /// Dotted metadata keys, in file order.
    pub meta: Vec<(String, String)>,
    /// Tensors beyond the network layout, in file order.
    pub extras: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(config: KeyNetConfig, weights: KeyNetWeights<f32>) -> Self {
        Self {
            config,
            weights,
            meta: Vec::new(),
            extras: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor<f32>> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut text = self.config.to_text();
        for (k, v) in &self.meta {
            if !k.contains('.') || k.contains('\n') || v.contains('\n') {
                return Err(CheckpointError::Inconsistent(format!(
                    "metadata key {k:?} must contain a dot and be single-line"
                )));
            }
            text.push_str(&format!("{k} = {v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let named = self.weights.named_tensors();
        let all: Vec<(&str, &Tensor<f32>)> = named
            .iter()
            .map(|(n, t)| (n.as_str(), *t))
            .chain(self.extras.iter().map(|(n, t)| (n.as_str(), t)))
            .collect();
        out.extend_from_slice(&(all.len() as u32).to_le_bytes());
        for (name, t) in all {
            let too_big = name.len() > u16::MAX as usize
                || t.rank() > u8::MAX as usize
                || t.shape().iter().any(|&d| d > u32::MAX as usize);
            if too_big {
                return Err(CheckpointError::Inconsistent(format!(
                    "tensor {name} cannot be encoded"
                )));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let text_len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(text_len, "config")?)
            .map_err(|_| CheckpointError::Inconsistent("configuration is not UTF-8".into()))?;
        let mut config = KeyNetConfig::default();
        let mut meta = Vec::new();
        for (k, v) in parse_pairs(text)? {
            if k.contains('.') {
                meta.push((k, v));
            } else {
                config.set(&k, &v)?;
            }
        }
        config.validate()?;

        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| CheckpointError::Inconsistent("tensor name is not UTF-8".into()))?;
            let rank = r.take(1, "tensor rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("tensor dims")? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Inconsistent(format!("tensor {name} too large")))?;
            let raw = r.take(n, "tensor data")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(dims, data).expect("length matches dims");
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Inconsistent(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }

        let layout = tensor_layout(&config);
        if tensors.len() < layout.len() {
            return Err(CheckpointError::Inconsistent(format!(
                "expected at least {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        let extras = tensors.split_off(layout.len());
        for ((want_name, want_shape), (name, t)) in layout.iter().zip(&tensors) {
            if want_name != name {
                return Err(CheckpointError::Inconsistent(format!(
                    "expected tensor {want_name}, found {name}"
                )));
            }
            if want_shape.as_slice() != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: want_shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        let weights = KeyNetWeights::from_tensors(&config, tensors.into_iter().map(|(_, t)| t).collect())
            .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
        Ok(Self {
            config,
            weights,
            meta,
            extras,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let bytes = ckpt.to_bytes()?;
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a whole checkpoint; nothing is returned unless the file parses
/// completely.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

pub fn save_checkpoint(
    weights: &KeyNetWeights<f32>,
    config: &KeyNetConfig,
    path: &Path,
) -> Result<(), CheckpointError> {
    write_checkpoint(&Checkpoint::new(config.clone(), weights.clone()), path)
}

/// Loads weights and the configuration stored in the file.
pub fn load_checkpoint(path: &Path) -> Result<(KeyNetWeights<f32>, KeyNetConfig), CheckpointError> {
    let c = read_checkpoint(path)?;
    Ok((c.weights, c.config))
}
