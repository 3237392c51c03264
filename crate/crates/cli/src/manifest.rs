//! Run manifests: everything needed to repeat a run, written before any
//! output artefact.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use keynet::config::parse_pairs;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const HEADER: &str = "# keynet run manifest";

/// A fully resolved invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub threads: usize,
    /// Named input and output paths, in a fixed order per command.
    pub paths: Vec<(String, PathBuf)>,
    /// Every configuration value the command reads, defaults included.
    pub config: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, threads: usize) -> Self {
        Self {
            command: command.into(),
            version: VERSION.into(),
            threads,
            paths: Vec::new(),
            config: Vec::new(),
        }
    }

    pub fn path(&self, name: &str) -> Option<&Path> {
        self.paths.iter().find(|(k, _)| k == name).map(|(_, p)| p.as_path())
    }

    pub fn require_path(&self, name: &str) -> Result<&Path> {
        self.path(name)
            .with_context(|| format!("manifest has no path.{name}"))
    }

    pub fn set_path(&mut self, name: &str, path: &Path) {
        let abs = std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf());
        self.paths.push((name.into(), abs));
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{HEADER}\ncommand = {}\nversion = {}\nthreads = {}\n",
            self.command, self.version, self.threads
        );
        for (k, p) in &self.paths {
            s.push_str(&format!("path.{k} = {}\n", p.display()));
        }
        for (k, v) in &self.config {
            s.push_str(&format!("config.{k} = {v}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::new("", 1);
        m.version.clear();
        for (k, v) in parse_pairs(text)? {
            if let Some(name) = k.strip_prefix("path.") {
                m.paths.push((name.into(), PathBuf::from(v)));
            } else if let Some(name) = k.strip_prefix("config.") {
                m.config.push((name.into(), v));
            } else {
                match k.as_str() {
                    "command" => m.command = v,
                    "version" => m.version = v,
                    "threads" => m.threads = v.parse().with_context(|| format!("invalid threads {v:?}"))?,
                    _ => bail!("unknown manifest key {k:?}"),
                }
            }
        }
        if m.command.is_empty() {
            bail!("manifest names no command");
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Default location: inside the output directory, next to the output
    /// file, or `keynet-<command>.manifest` in the working directory.
    pub fn default_location(&self) -> PathBuf {
        if let Some(dir) = self.path("out_dir") {
            return dir.join("manifest.txt");
        }
        if let Some(file) = self.path("out") {
            let mut name = file.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest");
            return file.with_file_name(name);
        }
        PathBuf::from(format!("keynet-{}.manifest", self.command))
    }
}
