use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rodd_core::{Result, RoddError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "run.json";

/// `run.json`: enough to rerun every stage that wrote into the directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_path: String,
    pub config_sha256: String,
    pub seed: u64,
    /// Stages in the order they ran.
    pub stages: Vec<String>,
    /// Artifact name to path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
    /// Seconds since the Unix epoch of the last update.
    pub timestamp_unix: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn load_or_default(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn record_config(&mut self, path: &Path, bytes: &[u8], seed: u64) {
        let hash = sha256_hex(bytes);
        if !self.config_sha256.is_empty() && self.config_sha256 != hash {
            eprintln!("note: config differs from the one recorded in {MANIFEST}; updating");
        }
        self.config_path = path.display().to_string();
        self.config_sha256 = hash;
        self.seed = seed;
    }

    pub fn add_artifact(&mut self, name: &str) {
        self.artifacts.insert(name.to_string(), name.to_string());
    }

    pub fn save(&mut self, dir: &Path, stage: &str) -> Result<()> {
        self.stages.push(stage.to_string());
        self.timestamp_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| io_error(&path, e))
    }
}

pub fn io_error(path: &Path, source: std::io::Error) -> RoddError {
    RoddError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::default();
        m.record_config(Path::new("a.cfg"), b"seed = 1", 1);
        m.add_artifact("model.bin");
        m.save(dir.path(), "train").unwrap();
        let back = Manifest::load_or_default(dir.path()).unwrap();
        assert_eq!(back.stages, vec!["train"]);
        assert_eq!(back.artifacts["model.bin"], "model.bin");
        assert_eq!(back.seed, 1);
    }
}
