//! Run manifest: the single record that pins a run — resolved config, seed,
//! artifact checksums, timings. Two runs of the same config produce the
//! same artifact checksums.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocate::RankPlan;
use crate::config::RunConfig;
use crate::error::{GoraError, Result};
use crate::init::InitReport;
use crate::net::EvalMetrics;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

impl ArtifactRecord {
    pub fn new(name: &str, bytes: &[u8]) -> Self {
        ArtifactRecord {
            name: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timings {
    pub probe_ms: f64,
    pub init_ms: f64,
    pub train_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub label: String,
    pub seed: u64,
    pub workers: usize,
    pub config: RunConfig,
    pub timings: Timings,
    pub rank_plan: RankPlan,
    pub init_report: InitReport,
    pub probe_steps_used: usize,
    pub host_peak_bytes: usize,
    pub final_eval: EvalMetrics,
    pub artifacts: Vec<ArtifactRecord>,
}

impl RunManifest {
    pub fn checksum_of(&self, name: &str) -> Option<&str> {
        self.artifacts
            .iter()
            .find(|a| a.name == name)
            .map(|a| a.sha256.as_str())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| GoraError::Format(format!("manifest: {e}")))
    }
}
