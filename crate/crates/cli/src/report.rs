//! Report metadata and file output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    /// SHA-256 of the canonical JSON of the effective configuration.
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl RunMeta {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64) -> Result<Self> {
        Ok(Self { command: command.into(), config_hash: config_hash(config)?, seed, version: VERSION.into() })
    }
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(suite: &str, name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { suite: suite.into(), name: name.into(), passed, detail: detail.into() }
    }

    /// `PASS suite/name: detail` or `FAIL …`.
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} {}/{}: {}", self.suite, self.name, self.detail)
    }
}

pub fn checks_csv(checks: &[Check]) -> String {
    let mut s = String::from("suite,name,passed,detail\n");
    for c in checks {
        s.push_str(&format!("{},{},{},\"{}\"\n", c.suite, c.name, c.passed, c.detail.replace('"', "'")));
    }
    s
}

pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let json = serde_json::to_string(config)?;
    Ok(format!("{:x}", Sha256::digest(json.as_bytes())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Output directory that is created on first write.
#[derive(Clone, Debug)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.root).map_err(|source| CliError::Io { path: self.root.clone(), source })?;
        let path = self.path(name);
        fs::write(&path, contents).map_err(|source| CliError::Io { path: path.clone(), source })?;
        Ok(path)
    }

    /// One JSON value per line.
    pub fn write_jsonl<T: Serialize>(&self, name: &str, records: &[T]) -> Result<PathBuf> {
        let mut s = String::new();
        for r in records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        self.write(name, &s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"seed": 1, "x": [1.0, 2.0]})).unwrap();
        let b = config_hash(&serde_json::json!({"seed": 1, "x": [1.0, 2.0]})).unwrap();
        let c = config_hash(&serde_json::json!({"seed": 2, "x": [1.0, 2.0]})).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }
}
