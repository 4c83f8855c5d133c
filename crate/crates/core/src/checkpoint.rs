//! Versioned run checkpoints: a magic line followed by one JSON document.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::regularize::{ConsolidationRecord, EncoderSnapshot};
use crate::trainer::{RunArtifacts, Strategy};

pub const MAGIC: &str = "MODALANCHOR/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Resolved configuration the run was started with.
    pub config: serde_json::Value,
    pub strategy: Strategy,
    pub seed: u64,
    pub task_ids: Vec<String>,
    pub r: Vec<Vec<f64>>,
    pub baseline: Vec<f64>,
    pub wallclock: Vec<f64>,
    pub loss_logs: Vec<Vec<f64>>,
    pub records: Vec<ConsolidationRecord>,
    pub snapshots: Vec<EncoderSnapshot>,
    pub model: DualEncoder,
}

impl Checkpoint {
    pub fn from_run(config: serde_json::Value, run: &RunArtifacts) -> Self {
        Self {
            config,
            strategy: run.strategy.clone(),
            seed: run.seed,
            task_ids: run.task_ids.clone(),
            r: run.r.clone(),
            baseline: run.baseline.clone(),
            wallclock: run.wallclock.clone(),
            loss_logs: run.loss_logs.clone(),
            records: run.history.records.clone(),
            snapshots: run.history.snapshots.clone(),
            model: run.model.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        serde_json::to_writer(&mut out, self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        if header != MAGIC {
            return Err(Error::Format(format!(
                "expected '{MAGIC}', found '{}'",
                header.escape_default()
            )));
        }
        Ok(serde_json::from_slice(&bytes[nl + 1..])?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
