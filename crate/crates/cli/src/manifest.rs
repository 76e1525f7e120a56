//! Run manifests: one `manifest.json` per run directory.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn code_hash() -> String {
    let digest = Sha256::digest(code_version().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Label used to group runs in reports (`bpo`, `ppo`, `gbpo`).
    pub algo: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    pub code_hash: String,
    pub started_at: u64,
    pub finished_at: u64,
    /// The per-iteration CSV, relative to the run directory.
    pub metrics_csv: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn start(command: &str, algo: &str, config: serde_json::Value, seed: u64, metrics_csv: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            algo: algo.to_string(),
            config,
            seed,
            code_version: code_version(),
            code_hash: code_hash(),
            started_at: unix_seconds(),
            finished_at: 0,
            metrics_csv: metrics_csv.to_string(),
            outputs: Vec::new(),
        }
    }

    pub fn finish(&mut self, dir: &Path) -> CliResult<()> {
        self.finished_at = unix_seconds();
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Failure(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::input(&path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::input(&path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_sha256_hex() {
        let h = code_hash();
        assert_eq!(h.len(), 64);
        assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn round_trip() {
        let dir = std::env::temp_dir().join(format!("brrl-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut m = RunManifest::start("train", "bpo", serde_json::json!({ "eps": 0.2 }), 4, "training.csv");
        m.finish(&dir).unwrap();
        assert_eq!(RunManifest::load(&dir).unwrap(), m);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
