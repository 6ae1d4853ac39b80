//! `manifest.json`: what was produced, from which config, with digests.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    pub bytes: u64,
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub weight_format: String,
    pub forest_format: u32,
    /// Hash of the config used by the most recent stage.
    pub config_hash: String,
    pub seed: u64,
    pub main_accuracy: Option<f64>,
    pub stages: Vec<StageRecord>,
    /// Keyed by file name within the output directory.
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            weight_format: String::from_utf8_lossy(cced::model::WEIGHT_MAGIC).into_owned(),
            forest_format: cced::detector::FOREST_FORMAT_VERSION,
            config_hash,
            seed,
            main_accuracy: None,
            stages: Vec::new(),
            artifacts: BTreeMap::new(),
        }
    }

    /// The manifest in `dir`, or a fresh one.
    pub fn open(dir: &Path, config_hash: String, seed: u64) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::new(config_hash, seed));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let mut m: RunManifest = serde_json::from_str(&text).map_err(|e| {
            CliError::io(&path, std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })?;
        m.config_hash = config_hash;
        m.seed = seed;
        Ok(m)
    }

    pub fn record(&mut self, name: &str, bytes: &[u8], stage: &str) {
        self.artifacts.insert(
            name.to_string(),
            ArtifactEntry {
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
                stage: stage.to_string(),
            },
        );
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    /// Names whose file is missing or whose digest no longer matches.
    pub fn mismatches(&self, dir: &Path) -> Vec<String> {
        self.artifacts
            .iter()
            .filter(|(name, entry)| match std::fs::read(dir.join(name)) {
                Ok(bytes) => sha256_hex(&bytes) != entry.sha256,
                Err(_) => true,
            })
            .map(|(name, _)| name.clone())
            .collect()
    }
}
