//! Versioned model checkpoints tied to the schema they were trained on.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::AdamState;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const CHECKPOINT_TAG: &str = "chunkformer-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Hash of the feature schema the model's inputs were built from.
    pub schema_hash: String,
    pub epochs_done: usize,
    pub best_val_macro_f1: Option<f64>,
    pub train: TrainConfig,
    pub optimizer: AdamState,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, schema_hash: impl Into<String>, train: TrainConfig) -> Self {
        let optimizer = AdamState::new(&model.params().tensors());
        Checkpoint {
            format: CHECKPOINT_TAG.into(),
            version: CHECKPOINT_FORMAT_VERSION,
            schema_hash: schema_hash.into(),
            epochs_done: 0,
            best_val_macro_f1: None,
            train,
            optimizer,
            model,
        }
    }

    pub fn check_schema(&self, schema_hash: &str) -> Result<()> {
        if self.schema_hash != schema_hash {
            return Err(Error::Compatibility(format!(
                "checkpoint was trained on schema {} but the dataset uses {}",
                short(&self.schema_hash),
                short(schema_hash)
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::format(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let head: Header = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if head.format != CHECKPOINT_TAG {
            return Err(Error::format(path, format!("not a checkpoint: `{}`", head.format)));
        }
        if head.version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "{} has checkpoint version {}, this build reads {CHECKPOINT_FORMAT_VERSION}",
                path.display(),
                head.version
            )));
        }
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}
