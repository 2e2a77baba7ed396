use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunConfig;
use crate::error::{Error, Result};

/// Provenance of one run. Two runs with equal hashes are expected to write
/// identical reports (in single-thread mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub strategy: Option<String>,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub bundle_hash: String,
    pub template_hash: String,
    pub scorer_id: String,
    /// Digest of the parameter file a run loaded, if any.
    pub model_hash: Option<String>,
    pub versions: BTreeMap<String, String>,
    /// Seconds since the epoch; not part of the hash.
    pub created_at: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, bundle_hash: &str, template_hash: &str, scorer_id: &str) -> Self {
        let seeds = BTreeMap::from([
            ("split".to_string(), config.split_seed),
            ("train".to_string(), config.train.seed),
        ]);
        let versions = BTreeMap::from([("gicl-core".to_string(), env!("CARGO_PKG_VERSION").to_string())]);
        Self {
            command: command.to_string(),
            strategy: None,
            config: config.clone(),
            seeds,
            bundle_hash: bundle_hash.to_string(),
            template_hash: template_hash.to_string(),
            scorer_id: scorer_id.to_string(),
            model_hash: None,
            versions,
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("created_at");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::bundle(path, None, e.to_string()))
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
