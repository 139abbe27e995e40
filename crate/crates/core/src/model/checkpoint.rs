//! JSON checkpoint container.
//!
//! ```json
//! {
//!   "format": "icl-lab-checkpoint",
//!   "version": 1,
//!   "seed": 0,
//!   "step": 25,
//!   "config_hash": "…",
//!   "config": { …ExperimentConfig… },
//!   "params": { "variant": "skip", "readout": 2, "positions": null,
//!               "blocks": [ { "attention": { "heads": 3, "head_dim": 1,
//!                 "query": { "rows": 3, "cols": 3, "data": [...] }, ... } } ] }
//! }
//! ```
//!
//! Every matrix carries explicit `rows`/`cols` headers. Floats are written in
//! shortest round-trip form and parsed with correct rounding, so a
//! write/read cycle reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "icl-lab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub step: usize,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, step: usize, params: ModelParams) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed: config.seed,
            step,
            config_hash: config.hash(),
            config: config.resolved(),
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serialises");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let invalid = |reason: String| Error::InvalidCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(invalid(format!("unexpected format tag {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(invalid(format!("unsupported version {}", ckpt.version)));
        }
        if ckpt.params.variant != ckpt.config.variant {
            return Err(invalid("parameter variant disagrees with config".into()));
        }
        ckpt.params.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(ckpt)
    }
}
