//! Run manifests: what a subcommand ran with and what it produced.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn unix_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub subcommand: String,
    pub seed: Option<u64>,
    pub started_at: f64,
    pub finished_at: f64,
    /// Input paths and their SHA-256 digests.
    pub inputs: BTreeMap<String, String>,
    /// Output file names (relative to the run directory) and their digests.
    pub outputs: BTreeMap<String, String>,
    /// Outputs that carry wall-clock data and are left out of `outputs`.
    pub untracked_outputs: Vec<String>,
    /// Every setting of the run with defaults filled in.
    pub config: toml::Table,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: Option<u64>, config: toml::Table) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            seed,
            started_at: unix_seconds(),
            finished_at: 0.0,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            untracked_outputs: Vec::new(),
            config,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Records `path` under its name relative to `run_dir`.
    pub fn add_output(&mut self, run_dir: &Path, path: &Path) -> Result<()> {
        self.outputs.insert(relative(run_dir, path), sha256_file(path)?);
        Ok(())
    }

    pub fn add_untracked(&mut self, run_dir: &Path, path: &Path) {
        self.untracked_outputs.push(relative(run_dir, path));
    }

    /// Stamps the end time and writes `manifest.toml` into `run_dir`.
    pub fn finish(mut self, run_dir: &Path) -> Result<PathBuf> {
        self.finished_at = unix_seconds();
        let text = toml::to_string(&self).map_err(|e| pjfit_core::Error::Config(e.to_string()))?;
        let path = run_dir.join(MANIFEST_FILE);
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn relative(run_dir: &Path, path: &Path) -> String {
    path.strip_prefix(run_dir).unwrap_or(path).display().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a.txt");
        fs::write(&out, "hello").unwrap();
        let mut config = toml::Table::new();
        config.insert("lambda".into(), toml::Value::Float(0.6));
        let mut m = RunManifest::new("train", Some(3), config);
        m.add_output(dir.path(), &out).unwrap();
        let path = m.clone().finish(dir.path()).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back.outputs["a.txt"], "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824");
        assert_eq!(back.config, m.config);
        assert!(back.finished_at >= back.started_at);
    }
}
