//! Run configuration, loaded from TOML.
//!
//! Every field has a default, so a config file only needs the keys it
//! changes. Top-level scalars come first, then the `[suite]`, `[beta_base]`,
//! `[optimizer]`, `[trace]` and `[eval]` tables, and one `[[suite.tasks]]`
//! table per task. See `configs/default.toml` for a complete example.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::{BetaBases, SuiteConfig};
use crate::error::{invalid, Error, Result};
use crate::optimizer::OptimizerConfig;
use crate::scheduler::ScheduleMode;

/// Base KL coefficient shared by every task under the uniform-beta ablation.
pub const UNIFORM_BETA_BASE: f64 = 5e-3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    UniformQuotas,
    RandomPrompts,
    FixedBeta,
    UniformBeta,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::UniformQuotas,
        Ablation::RandomPrompts,
        Ablation::FixedBeta,
        Ablation::UniformBeta,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::UniformQuotas => "uniform-quotas",
            Ablation::RandomPrompts => "random-prompts",
            Ablation::FixedBeta => "fixed-beta",
            Ablation::UniformBeta => "uniform-beta",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Ablation::None]
            .into_iter()
            .chain(Ablation::ALL)
            .find(|a| a.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown ablation '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    /// Write `prompts.csv` with every prompt's weight at every step.
    pub verbose_prompts: bool,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig { verbose_prompts: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fresh rollouts per prompt in the final evaluation.
    pub rollouts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { rollouts: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Prompts per step (B).
    pub budget: usize,
    /// Rollouts per prompt (G).
    pub group_size: usize,
    /// Training steps (M).
    pub steps: u64,
    /// Softmax temperature of the quota allocation.
    pub tau: f64,
    /// Utility sensitivity of the KL coefficient.
    pub lambda_kl: f64,
    /// EMA smoothing factor.
    pub alpha: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub ablation: Ablation,
    pub suite: SuiteConfig,
    pub beta_base: BetaBases,
    pub optimizer: OptimizerConfig,
    pub trace: TraceConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            budget: 64,
            group_size: 8,
            steps: 300,
            tau: 1.0,
            lambda_kl: 0.2,
            alpha: 0.9,
            seed: 0,
            output_dir: PathBuf::from("runs/latest"),
            ablation: Ablation::None,
            suite: SuiteConfig::default(),
            beta_base: BetaBases::default(),
            optimizer: OptimizerConfig::default(),
            trace: TraceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 || self.group_size == 0 {
            return Err(Error::Config("budget and group_size must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_kl >= 0.0) {
            return Err(Error::Config("lambda_kl must be non-negative".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        self.suite.validate()?;
        let pool: usize = self.suite.tasks.iter().map(|t| t.pool_size).sum();
        if self.budget > pool {
            return Err(Error::Config(format!("budget {} exceeds total prompt pool {pool}", self.budget)));
        }
        self.optimizer.validate()
    }

    /// KL sensitivity after the ablation is applied.
    pub fn effective_lambda(&self) -> f64 {
        match self.ablation {
            Ablation::FixedBeta => 0.0,
            _ => self.lambda_kl,
        }
    }

    /// Per-shape KL bases after the ablation is applied.
    pub fn effective_betas(&self) -> BetaBases {
        match self.ablation {
            Ablation::UniformBeta => BetaBases::uniform(UNIFORM_BETA_BASE),
            _ => self.beta_base,
        }
    }

    pub fn schedule_mode(&self) -> ScheduleMode {
        ScheduleMode {
            uniform_quotas: self.ablation == Ablation::UniformQuotas,
            random_prompts: self.ablation == Ablation::RandomPrompts,
        }
    }
}
