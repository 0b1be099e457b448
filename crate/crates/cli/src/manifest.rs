use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Hash of a model file that was used by a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub path: PathBuf,
    /// `sha256("blob <len>\0" ++ bytes)`, hex.
    pub blob_hash: String,
}

/// Record written once per artifact-producing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_digest: String,
    pub seed: u64,
    pub threads: usize,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
    pub model: Option<ModelRef>,
    /// Command-specific counters such as neural applications per run.
    #[serde(default)]
    pub summary: serde_json::Map<String, serde_json::Value>,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn model_ref(path: &Path) -> Result<ModelRef, CliError> {
    let bytes = std::fs::read(path)?;
    Ok(ModelRef { path: path.to_path_buf(), blob_hash: blob_hash(&bytes) })
}

impl RunManifest {
    pub fn new(command: &str, config_text: &str, seed: u64, threads: usize) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config_digest: digest(config_text),
            seed,
            threads,
            started_unix: unix_now(),
            finished_unix: 0.0,
            outputs: Vec::new(),
            model: None,
            summary: serde_json::Map::new(),
        }
    }

    pub fn record(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.summary.insert(key.to_string(), value.into());
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf, CliError> {
        self.finished_unix = unix_now();
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_construction() {
        // sha256 of "blob 0\0"
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
        assert_ne!(blob_hash(b"a"), blob_hash(b"b"));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("table", "id = 1", 7, 1);
        m.outputs.push(dir.path().join("t.csv"));
        m.record("rows", 4);
        let p = m.clone().finish(dir.path()).unwrap();
        let back: RunManifest = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(back.summary["rows"], 4);
        assert_eq!(back.config_digest, m.config_digest);
        assert!(back.finished_unix >= back.started_unix);
    }
}
