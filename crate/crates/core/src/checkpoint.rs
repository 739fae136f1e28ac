//! JSON checkpoints.
//!
//! ```json
//! {
//!   "format": "astor-checkpoint",
//!   "version": 1,
//!   "step": 300,
//!   "seed": 0,
//!   "params": { "layers": [...], "vocab_size": 32, "seq_len": 4, "feature_dim": 128 },
//!   "ref_params": { ... },
//!   "ledger": { "alpha": 0.9, "step": 300, "tasks": {...}, "prompts": [...] },
//!   "optimizer_state": { "step": 300, "total_steps": 300, ... }
//! }
//! ```
//!
//! Floats are written with round-trip precision, so restoring a checkpoint
//! and continuing gives the same result as never stopping.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::OptimizerState;
use crate::policy::PolicyParams;
use crate::trainer::TrainState;
use crate::utility::UtilityLedger;

pub const FORMAT: &str = "astor-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub seed: u64,
    pub params: PolicyParams,
    pub ref_params: PolicyParams,
    pub ledger: UtilityLedger,
    pub optimizer_state: OptimizerState,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            step: state.step,
            seed: state.seed,
            params: state.params.clone(),
            ref_params: state.ref_params.clone(),
            ledger: state.ledger.clone(),
            optimizer_state: state.optimizer_state.clone(),
        }
    }

    /// The old policy is not stored: it is refreshed before every rollout.
    pub fn into_state(self) -> TrainState {
        TrainState {
            step: self.step,
            old_params: self.params.clone(),
            params: self.params,
            ref_params: self.ref_params,
            ledger: self.ledger,
            optimizer_state: self.optimizer_state,
            seed: self.seed,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format tag '{}'", ckpt.format)));
        }
        if ckpt.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        ckpt.params.validate()?;
        if !ckpt.params.same_shape(&ckpt.ref_params) {
            return Err(Error::Checkpoint("params and ref_params shapes differ".into()));
        }
        Ok(ckpt)
    }
}
