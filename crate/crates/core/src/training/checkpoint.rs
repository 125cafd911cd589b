use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::TsnetModel;
use crate::error::{Result, TsnetError};

pub const CHECKPOINT_FORMAT: &str = "tsnet-checkpoint/1";

/// A model plus the configuration that produced it, as one JSON document.
/// Parameter tensors are stored row-major in the model's store order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub model: TsnetModel,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, seed: u64, model: TsnetModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config,
            seed,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| TsnetError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TsnetError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(TsnetError::Schema(format!(
                "unsupported checkpoint format '{}', expected '{CHECKPOINT_FORMAT}'",
                ck.format
            )));
        }
        Ok(ck)
    }
}
