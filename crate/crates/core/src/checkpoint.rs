//! Versioned JSON checkpoints of a trained Q function and reward model.
//!
//! Networks are stored as their layer sizes, head and flat parameter
//! vector; tabular Q functions as their weight-grid resolution and table.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::DomainError;
use crate::eql::{QFunction, RunArtifacts};
use crate::envs::EnvKind;
use crate::reward_model::RewardModel;

pub const FORMAT: &str = "pbmorl-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint")]
    Parse(#[from] serde_json::Error),
    #[error("not a checkpoint (format tag {0:?})")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    Version { found: u32 },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub env: EnvKind,
    pub gamma: f64,
    pub step: usize,
    pub q: QFunction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_model: Option<RewardModel>,
}

impl Checkpoint {
    pub fn new(env: EnvKind, gamma: f64, step: usize, q: QFunction, reward_model: Option<RewardModel>) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            env,
            gamma,
            step,
            q,
            reward_model,
        }
    }

    pub fn from_run(env: EnvKind, gamma: f64, run: &RunArtifacts) -> Self {
        Checkpoint::new(env, gamma, run.steps_completed, run.q.clone(), run.reward_model.clone())
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let tag = raw.get("format").and_then(|f| f.as_str()).unwrap_or_default();
        if tag != FORMAT {
            return Err(CheckpointError::Format(tag.to_string()));
        }
        let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != VERSION {
            return Err(CheckpointError::Version { found });
        }
        let mut ck: Checkpoint = serde_json::from_value(raw)?;
        if let QFunction::Tabular(t) = &mut ck.q {
            t.restore_grid()?;
        }
        Ok(ck)
    }

    /// Writes through a temporary file so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}
