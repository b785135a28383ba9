//! JSON checkpoints.
//!
//! ```text
//! {
//!   "format": "matl-checkpoint-v1",
//!   "mode": "multi_task",
//!   "config": { ...ModelConfig... },
//!   "params": { "encoder.conv0.weight": {"shape": [8, 3, 3, 3], "data": [...]}, ... },
//!   "batch_norm": { "encoder.bn0": {"mean": [...], "var": [...]}, ... }
//! }
//! ```
//!
//! Values are 32-bit floats written in shortest round-trip form, so a
//! save/load cycle is exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, ModelMode};
use super::model::{ModelParams, RunningStats};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "matl-checkpoint-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    mode: ModelMode,
    config: ModelConfig,
    params: BTreeMap<String, Tensor<f32>>,
    batch_norm: BTreeMap<String, RunningStats<f32>>,
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        mode: params.mode,
        config: params.config.clone(),
        params: params.tensors.clone(),
        batch_norm: params.running.clone(),
    };
    let text = serde_json::to_string(&ck).expect("checkpoint serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads and checks that the tensors match the stored config and mode.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::Config(format!(
            "{}: unsupported checkpoint format {:?}",
            path.display(),
            ck.format
        )));
    }
    let params = ModelParams {
        config: ck.config,
        mode: ck.mode,
        tensors: ck.params,
        running: ck.batch_norm,
    };
    params.check_layout()?;
    Ok(params)
}
