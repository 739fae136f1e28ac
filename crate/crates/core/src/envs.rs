//! Synthetic verifiable-reward tasks.
//!
//! Four reward shapes stand in for execution correctness, test pass ratio,
//! coverage and text similarity. Each prompt has a hidden target sequence
//! whose first token is the suite's format token. Targets deviate from a
//! per-task "easy core" sequence at a per-prompt rate, and the alignment
//! matrix copies (positive entries) or mirrors (negative entries) targets
//! between tasks on shared prompts so cross-task gradient agreement can be
//! steered.
//!
//! Prompt features are laid out as `[1, task one-hot (K), shared random part]`.

use std::collections::BTreeSet;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::policy::{PolicyParams, PromptContext, RolloutGroup};
use crate::rewards::{fuse_flag, text_similarity, RewardWeights};
use crate::rng::{rng_from_seed, stream_seed, Stream};
use crate::{PromptId, TaskId, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardShape {
    BinaryExec,
    PassRatio,
    Coverage,
    Similarity,
}

impl RewardShape {
    pub const ALL: [RewardShape; 4] = [
        RewardShape::BinaryExec,
        RewardShape::PassRatio,
        RewardShape::Coverage,
        RewardShape::Similarity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RewardShape::BinaryExec => "binary_exec",
            RewardShape::PassRatio => "pass_ratio",
            RewardShape::Coverage => "coverage",
            RewardShape::Similarity => "similarity",
        }
    }
}

/// Base KL coefficient per reward shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BetaBases {
    pub binary_exec: f64,
    pub pass_ratio: f64,
    pub coverage: f64,
    pub similarity: f64,
}

impl Default for BetaBases {
    /// Sharp landscapes (exact match, set coverage) get 1e-2, graded ones 1e-4.
    fn default() -> Self {
        BetaBases {
            binary_exec: 1e-2,
            pass_ratio: 1e-4,
            coverage: 1e-2,
            similarity: 1e-4,
        }
    }
}

impl BetaBases {
    pub fn uniform(beta: f64) -> Self {
        BetaBases {
            binary_exec: beta,
            pass_ratio: beta,
            coverage: beta,
            similarity: beta,
        }
    }

    pub fn get(&self, shape: RewardShape) -> f64 {
        match shape {
            RewardShape::BinaryExec => self.binary_exec,
            RewardShape::PassRatio => self.pass_ratio,
            RewardShape::Coverage => self.coverage,
            RewardShape::Similarity => self.similarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    pub shape: RewardShape,
    /// Upper bound of the per-prompt deviation rate from the task's core.
    pub difficulty: f64,
    pub pool_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub feature_dim: usize,
    pub format_token: Token,
    /// Logit bonus the initial policy gives each task's core tokens on that
    /// task's prompts (routed through the task-indicator feature).
    pub init_prior: f64,
    /// Logit bonus every prompt gives every task's core tokens (routed
    /// through the intercept feature), like a pretrained model that knows the
    /// typical outputs of all tasks but not which one is being asked for.
    pub shared_prior: f64,
    /// Logit bonus of the format token at position 0 on every prompt.
    pub format_prior: f64,
    /// Standard deviation of the random initial weights.
    pub init_scale: f64,
    pub seed: u64,
    pub tasks: Vec<TaskConfig>,
    /// K x K, symmetric, unit diagonal, entries in [-1, 1].
    pub alignment: Vec<Vec<f64>>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        let tasks: Vec<TaskConfig> = RewardShape::ALL
            .iter()
            .zip([0.1, 0.4, 0.7, 1.0])
            .map(|(&shape, difficulty)| TaskConfig {
                name: shape.as_str().to_string(),
                shape,
                difficulty,
                pool_size: 256,
            })
            .collect();
        SuiteConfig {
            vocab_size: 32,
            seq_len: 4,
            feature_dim: 128,
            format_token: 0,
            init_prior: 3.0,
            shared_prior: 0.0,
            format_prior: 8.0,
            init_scale: 0.01,
            seed: 0,
            alignment: identity(tasks.len()),
            tasks,
        }
    }
}

pub fn identity(k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

impl SuiteConfig {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.tasks.len();
        if k == 0 {
            return Err(invalid("suite needs at least one task"));
        }
        if self.vocab_size < 2 || self.seq_len == 0 {
            return Err(invalid("suite needs V >= 2 and L >= 1"));
        }
        if self.feature_dim < k + 2 {
            return Err(invalid(format!(
                "feature_dim {} too small for {k} tasks (need >= K + 2)",
                self.feature_dim
            )));
        }
        if self.format_token >= self.vocab_size {
            return Err(invalid("format token outside vocabulary"));
        }
        let priors = [self.init_prior, self.shared_prior, self.format_prior];
        if priors.iter().any(|p| !p.is_finite()) || !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return Err(invalid("priors and init_scale must be finite, init_scale >= 0"));
        }
        for t in &self.tasks {
            if t.pool_size == 0 {
                return Err(invalid(format!("task {:?} has an empty prompt pool", t.name)));
            }
            if !(0.0..=1.0).contains(&t.difficulty) {
                return Err(invalid(format!("task {:?} difficulty outside [0, 1]", t.name)));
            }
        }
        validate_alignment(&self.alignment, k)
    }
}

pub fn validate_alignment(a: &[Vec<f64>], k: usize) -> Result<()> {
    if a.len() != k || a.iter().any(|row| row.len() != k) {
        return Err(invalid(format!("alignment matrix must be {k} x {k}")));
    }
    for i in 0..k {
        if a[i][i] != 1.0 {
            return Err(invalid("alignment matrix needs a unit diagonal"));
        }
        for j in 0..k {
            if !(-1.0..=1.0).contains(&a[i][j]) {
                return Err(invalid("alignment entries must lie in [-1, 1]"));
            }
            if a[i][j] != a[j][i] {
                return Err(invalid("alignment matrix must be symmetric"));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub sequence: Vec<Token>,
    /// Distinct tokens of the target after the format position.
    pub token_set: BTreeSet<Token>,
}

impl Target {
    fn new(sequence: Vec<Token>) -> Self {
        let body = if sequence.len() > 1 { &sequence[1..] } else { &sequence[..] };
        Target {
            token_set: body.iter().copied().collect(),
            sequence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub name: String,
    pub reward_shape: RewardShape,
    pub prompt_pool: Vec<PromptContext>,
    /// Indexed like `prompt_pool`; prompt ids are pool indices.
    pub targets: Vec<Target>,
    pub beta_base: f64,
    pub difficulty: f64,
    pub format_token: Token,
    /// Target sequence of a zero-difficulty prompt.
    pub core: Vec<Token>,
    pub reward_weights: RewardWeights,
}

impl TaskSpec {
    pub fn target(&self, prompt_id: PromptId) -> Result<&Target> {
        self.targets
            .get(prompt_id.0)
            .ok_or_else(|| invalid(format!("task {} has no prompt {}", self.task_id, prompt_id)))
    }

    pub fn prompt(&self, prompt_id: PromptId) -> Result<&PromptContext> {
        self.prompt_pool
            .get(prompt_id.0)
            .ok_or_else(|| invalid(format!("task {} has no prompt {}", self.task_id, prompt_id)))
    }

    pub fn shape_metric(&self, sequence: &[Token], target: &Target) -> f64 {
        match self.reward_shape {
            RewardShape::BinaryExec => binary_exec_reward(sequence, &target.sequence),
            RewardShape::PassRatio => pass_ratio_reward(sequence, &target.sequence),
            RewardShape::Coverage => coverage_reward(sequence, &target.token_set),
            RewardShape::Similarity => similarity_reward(sequence, &target.sequence),
        }
    }

    pub fn is_format_compliant(&self, sequence: &[Token]) -> bool {
        sequence.first() == Some(&self.format_token)
    }

    /// Fused training reward of one sequence for one prompt.
    pub fn reward(&self, prompt_id: PromptId, sequence: &[Token]) -> Result<f64> {
        let target = self.target(prompt_id)?;
        let metric = self.shape_metric(sequence, target);
        Ok(fuse_flag(metric, self.is_format_compliant(sequence), self.reward_weights).fused)
    }
}

pub fn binary_exec_reward(sequence: &[Token], target: &[Token]) -> f64 {
    if sequence == target {
        1.0
    } else {
        0.0
    }
}

/// Fraction of positions that match the target.
pub fn pass_ratio_reward(sequence: &[Token], target: &[Token]) -> f64 {
    if target.is_empty() {
        return 0.0;
    }
    let hits = sequence.iter().zip(target).filter(|(a, b)| a == b).count();
    hits as f64 / target.len() as f64
}

/// Fraction of the target token set that appears somewhere in the sequence.
pub fn coverage_reward(sequence: &[Token], target_set: &BTreeSet<Token>) -> f64 {
    if target_set.is_empty() {
        return 0.0;
    }
    let seen: BTreeSet<Token> = sequence.iter().copied().collect();
    seen.intersection(target_set).count() as f64 / target_set.len() as f64
}

pub fn similarity_reward(sequence: &[Token], reference: &[Token]) -> f64 {
    text_similarity(sequence, reference).unwrap_or(0.0)
}

/// The synthetic format gate: the leading token must be the format token.
pub fn synthetic_format_flags(task: &TaskSpec, group: &RolloutGroup) -> Vec<bool> {
    group.sequences.iter().map(|s| task.is_format_compliant(s)).collect()
}

/// Fill `group.rewards` with fused rewards.
pub fn score_rollouts(task: &TaskSpec, mut group: RolloutGroup, format_flags: &[bool]) -> Result<RolloutGroup> {
    if format_flags.len() != group.sequences.len() {
        return Err(invalid("one format flag per rollout is required"));
    }
    let target = task.target(group.prompt_id)?;
    group.rewards = group
        .sequences
        .iter()
        .zip(format_flags)
        .map(|(s, &ok)| fuse_flag(task.shape_metric(s, target), ok, task.reward_weights).fused)
        .collect();
    Ok(group)
}

/// Every sequence of length `l` over `v` tokens, in lexicographic order.
pub fn enumerate_sequences(v: usize, l: usize) -> impl Iterator<Item = Vec<Token>> {
    let total = v.checked_pow(l as u32).unwrap_or(usize::MAX);
    (0..total).map(move |mut idx| {
        let mut seq = vec![0; l];
        for slot in seq.iter_mut().rev() {
            *slot = idx % v;
            idx /= v;
        }
        seq
    })
}

pub const MAX_ENUMERATION: usize = 65_536;

/// Exact expected fused reward by enumerating all `V^L` sequences.
pub fn exact_expected_reward(params: &PolicyParams, task: &TaskSpec, prompt: &PromptContext) -> Result<f64> {
    let (v, l) = (params.vocab_size(), params.seq_len());
    match v.checked_pow(l as u32) {
        Some(n) if n <= MAX_ENUMERATION => {}
        _ => return Err(invalid(format!("V^L too large to enumerate (V={v}, L={l})"))),
    }
    let table = params.log_prob_table(prompt)?;
    let mut total = 0.0;
    for seq in enumerate_sequences(v, l) {
        let p = table.sequence_log_prob(&seq).exp();
        if p > 0.0 {
            total += p * task.reward(prompt.prompt_id, &seq)?;
        }
    }
    Ok(total)
}

fn mirror(token: Token, v: usize) -> Token {
    (token + v / 2) % v
}

fn random_other(rng: &mut crate::rng::Rng, v: usize, avoid: Token) -> Token {
    let t = rng.random_range(0..v - 1);
    if t >= avoid {
        t + 1
    } else {
        t
    }
}

/// Build the task suite. Pure in `config`.
pub fn make_suite(config: &SuiteConfig, betas: &BetaBases) -> Result<Vec<TaskSpec>> {
    config.validate()?;
    let k = config.tasks.len();
    let (v, l, f) = (config.vocab_size, config.seq_len, config.feature_dim);
    let mut rng = rng_from_seed(stream_seed(config.seed, Stream::Suite, &[]));

    let max_pool = config.tasks.iter().map(|t| t.pool_size).max().unwrap_or(0);
    let rand_dim = f - 1 - k;
    let shared: Vec<Vec<f64>> = (0..max_pool)
        .map(|_| {
            let mut x: Vec<f64> = (0..rand_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            x.iter_mut().for_each(|a| *a /= n);
            x
        })
        .collect();

    let mut specs: Vec<TaskSpec> = Vec::with_capacity(k);
    for (ki, tc) in config.tasks.iter().enumerate() {
        // strongest alignment to an earlier task decides the parent
        let parent = (0..ki)
            .map(|j| (j, config.alignment[j][ki]))
            .filter(|(_, a)| *a != 0.0)
            .fold(None::<(usize, f64)>, |best, cur| match best {
                Some(b) if b.1.abs() >= cur.1.abs() => Some(b),
                _ => Some(cur),
            });
        let inherit = |rng: &mut crate::rng::Rng, parent_token: Token, a: f64| -> Option<Token> {
            if rng.random::<f64>() < a.abs() {
                Some(if a > 0.0 { parent_token } else { mirror(parent_token, v) })
            } else {
                None
            }
        };

        let mut core = vec![config.format_token; l];
        for p in 1..l {
            core[p] = match parent {
                Some((j, a)) => inherit(&mut rng, specs[j].core[p], a),
                None => None,
            }
            .unwrap_or_else(|| rng.random_range(0..v));
        }

        let mut pool = Vec::with_capacity(tc.pool_size);
        let mut targets = Vec::with_capacity(tc.pool_size);
        for q in 0..tc.pool_size {
            let mut features = vec![0.0; f];
            features[0] = 1.0;
            features[1 + ki] = 1.0;
            features[1 + k..].copy_from_slice(&shared[q]);
            pool.push(PromptContext {
                prompt_id: PromptId(q),
                task_id: TaskId(ki),
                features,
            });

            let deviation = tc.difficulty * rng.random::<f64>();
            let mut seq = vec![config.format_token; l];
            for p in 1..l {
                let inherited = match parent {
                    Some((j, a)) if q < specs[j].targets.len() => {
                        inherit(&mut rng, specs[j].targets[q].sequence[p], a)
                    }
                    _ => None,
                };
                seq[p] = inherited.unwrap_or_else(|| {
                    if rng.random::<f64>() < deviation {
                        random_other(&mut rng, v, core[p])
                    } else {
                        core[p]
                    }
                });
            }
            targets.push(Target::new(seq));
        }

        specs.push(TaskSpec {
            task_id: TaskId(ki),
            name: tc.name.clone(),
            reward_shape: tc.shape,
            prompt_pool: pool,
            targets,
            beta_base: betas.get(tc.shape),
            difficulty: tc.difficulty,
            format_token: config.format_token,
            core,
            reward_weights: RewardWeights::default(),
        });
    }
    for s in &specs {
        if !(s.beta_base > 0.0) {
            return Err(invalid(format!("task {} has non-positive beta_base", s.name)));
        }
    }
    Ok(specs)
}

/// Initial ("pretrained") policy: small random weights plus a logit prior
/// toward each task's core tokens, routed through the task-indicator feature.
pub fn initial_policy(config: &SuiteConfig, tasks: &[TaskSpec]) -> Result<PolicyParams> {
    let (v, l, f) = (config.vocab_size, config.seq_len, config.feature_dim);
    let mut params = PolicyParams::zeros(v, l, f)?;
    let mut rng = rng_from_seed(stream_seed(config.seed, Stream::Init, &[]));
    let w = params.weights_mut().data_mut();
    for x in w.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x = config.init_scale * z;
    }
    w[config.format_token * f] += config.format_prior;
    for task in tasks {
        let col = 1 + task.task_id.0;
        for (p, &tok) in task.core.iter().enumerate().skip(1) {
            w[(p * v + tok) * f + col] += config.init_prior;
            w[(p * v + tok) * f] += config.shared_prior;
        }
    }
    params.validate()?;
    Ok(params)
}
