//! Model checkpoints: one JSON blob with the full configuration, all
//! parameter arrays (row-major f64), batch-norm running statistics, the
//! normalization statistics the model was trained with, and the RNG seeds.

use super::{Model, ModelError};
use crate::data::NormStats;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: &str = "graphdiag-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub model: Model,
    /// Statistics fit on the training split; evaluation refuses to run when
    /// the recomputed hash disagrees.
    pub norm_stats: NormStats,
    pub norm_stats_hash: String,
    pub window: usize,
    pub train_stride: usize,
    pub change_point: usize,
    pub split_seed: u64,
    pub split_fraction: f64,
    pub train_fraction: f64,
    pub init_seed: u64,
    pub train_seed: u64,
}

impl Checkpoint {
    pub fn new(
        model: Model,
        norm_stats: NormStats,
        window: usize,
        train_stride: usize,
        change_point: usize,
        split_seed: u64,
        split_fraction: f64,
        train_fraction: f64,
        init_seed: u64,
        train_seed: u64,
    ) -> Self {
        let norm_stats_hash = norm_stats.content_hash();
        Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            model,
            norm_stats,
            norm_stats_hash,
            window,
            train_stride,
            change_point,
            split_seed,
            split_fraction,
            train_fraction,
            init_seed,
            train_seed,
        }
    }

    /// Atomic write: temp file in the target directory, then rename.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = serde_json::to_string(self)?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "version '{}' not supported (expected '{}')",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        if ckpt.norm_stats.content_hash() != ckpt.norm_stats_hash {
            return Err(ModelError::Checkpoint(
                "normalization statistics do not match their recorded hash".into(),
            ));
        }
        Ok(ckpt)
    }
}
