//! Run configuration file: one JSON document mirroring the training
//! configuration plus data paths, the synthetic-generation block, the
//! evaluation block, and the output directory. Unknown keys are rejected;
//! command-line flags override file values.

use hcts_core::data::SyntheticConfig;
use hcts_core::error::{Error, Result};
use hcts_core::evaluation::HeadTailMode;
use hcts_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub source_interactions: Option<PathBuf>,
    pub target_interactions: Option<PathBuf>,
    pub min_user_degree: usize,
    pub min_item_degree: usize,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            source_interactions: None,
            target_interactions: None,
            min_user_degree: 5,
            min_item_degree: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    pub k: usize,
    pub head_tail_mode: HeadTailMode,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            k: 10,
            head_tail_mode: HeadTailMode::ItemCount,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub data: DataPaths,
    pub synthetic: Option<SyntheticConfig>,
    pub train: TrainConfig,
    pub eval: EvalBlock,
    pub out_dir: Option<PathBuf>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfigFile = serde_json::from_str(&text)
            .map_err(|e| Error::usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.train.validate()?;
        if let Some(s) = &cfg.synthetic {
            s.validate()?;
        }
        Ok(cfg)
    }

    /// The config as a JSON value, echoed into every output artifact.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
