//! Run manifests: config echo, seeds and input hashes as `key = value` lines.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Hash over every regular file of a directory, in name order.
pub fn sha256_dir(dir: &Path) -> Result<String> {
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        h.update(n.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(std::fs::read(dir.join(&n))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn sha256_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        sha256_dir(path)
    } else {
        sha256_file(path)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Manifest::default();
        m.set("command", command);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn extend_config(&mut self, config: BTreeMap<String, String>) {
        for (k, v) in config {
            self.entries.insert(format!("config.{k}"), v);
        }
    }

    /// Records the input's file name and content hash. The full path is left
    /// out so identical runs from different directories match byte for byte.
    pub fn hash_input(&mut self, name: &str, path: &Path) -> Result<()> {
        let file = path.file_name().map_or_else(|| path.display().to_string(), |f| f.to_string_lossy().into_owned());
        self.set(&format!("input.{name}"), file);
        self.set(&format!("input.{name}.sha256"), sha256_path(path)?);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
        );
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let entries = edda_core::edmodel::parse_key_values(&text)?;
        Ok(Manifest { entries })
    }
}
