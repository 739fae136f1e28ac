//! Utility-driven multi-task GRPO coordination.
//!
//! A shared toy sequence policy is trained on several synthetic tasks with
//! verifiable rewards. Each step the scheduler splits a prompt budget across
//! tasks from smoothed learning-potential and gradient-synergy utilities,
//! prioritizes prompts within each task, and the optimizer applies a GRPO
//! update whose per-task KL coefficient is scaled by the same utility.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod envs;
pub mod error;
pub mod optimizer;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod scheduler;
pub mod tensor;
pub mod trace;
pub mod trainer;
pub mod utility;

pub use error::{Error, Result};

/// Vocabulary index.
pub type Token = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptId(pub usize);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
