//! The training loop.
//!
//! One step runs six phases in order: fold last step's statistics into the
//! EMAs, turn utilities into quotas, pick prompts, generate and score
//! rollouts with the saved old policy, apply one GRPO update with
//! utility-scaled KL, and record this step's statistics for the next one.
//! `train_step` never mutates its input, so a failed step leaves the
//! previous state intact.

use std::collections::BTreeMap;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::envs::{initial_policy, make_suite, score_rollouts, synthetic_format_flags, TaskSpec};
use crate::error::{Error, Result};
use crate::optimizer::{
    dynamic_kl_coefficient, multitask_objective, optimizer_step, task_objective_with_grad, OptimizerState,
    PromptBatch, TaskLossBreakdown,
};
use crate::policy::{greedy_sequence, sample_rollouts, Gradient, PolicyParams, RolloutGroup};
use crate::rng::{stream_seed, Stream};
use crate::scheduler::{schedule_from_utilities, ScheduleDecision, ScheduleMode};
use crate::utility::{
    compress_gradient, cosine_similarity, reward_variance, task_potential, task_synergy, CompressedGradient,
    TaskUtility, UtilityLedger,
};
use crate::{PromptId, TaskId};

/// Everything a step needs that does not change during training.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub config: RunConfig,
    pub tasks: Vec<TaskSpec>,
    /// KL sensitivity after the ablation.
    pub lambda: f64,
    pub mode: ScheduleMode,
}

impl TrainContext {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let tasks = make_suite(&config.suite, &config.effective_betas())?;
        Ok(TrainContext {
            lambda: config.effective_lambda(),
            mode: config.schedule_mode(),
            tasks,
            config,
        })
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(|t| t.task_id).collect()
    }

    pub fn initial_state(&self) -> Result<TrainState> {
        let params = initial_policy(&self.config.suite, &self.tasks)?;
        let grad_dim = compress_gradient(&params).dim();
        Ok(TrainState {
            step: 0,
            old_params: params.clone(),
            ref_params: params.clone(),
            params,
            ledger: UtilityLedger::new(&self.task_ids(), grad_dim, self.config.alpha)?,
            optimizer_state: OptimizerState::new(self.config.steps),
            seed: self.config.seed,
        })
    }

    /// Seed of the held-out evaluation pass. Shared by every run with the
    /// same root seed so paired comparisons see the same randomness.
    pub fn eval_seed(&self) -> u64 {
        stream_seed(self.config.seed, Stream::Evaluation, &[])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Last completed step; 0 before training.
    pub step: u64,
    pub params: PolicyParams,
    /// Policy that generated the latest rollouts.
    pub old_params: PolicyParams,
    /// Frozen initial policy, the KL anchor.
    pub ref_params: PolicyParams,
    pub ledger: UtilityLedger,
    pub optimizer_state: OptimizerState,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskStepRecord {
    pub task_id: TaskId,
    /// Utility the schedule and the KL coefficient were computed from.
    pub utility: TaskUtility,
    pub fractional_quota: f64,
    pub integer_quota: usize,
    pub rollouts: usize,
    pub beta: f64,
    /// Present only for tasks that received prompts.
    pub loss: Option<TaskLossBreakdown>,
    pub mean_reward: Option<f64>,
    /// Variance over all of the task's rollout rewards this step.
    pub reward_variance: Option<f64>,
    /// Instantaneous learning potential (mean per-prompt variance).
    pub potential: Option<f64>,
    /// Instantaneous synergy from the updated gradient EMAs.
    pub synergy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptRecord {
    pub task_id: TaskId,
    pub prompt_id: PromptId,
    pub weight: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub tasks: Vec<TaskStepRecord>,
    /// `(i, j, cosine)` of gradient EMAs for i < j.
    pub similarity: Vec<(TaskId, TaskId, f64)>,
    pub prompts: Vec<PromptRecord>,
    pub objective: f64,
    /// Norm of the aggregated gradient before clipping.
    pub grad_norm: f64,
    pub warnings: Vec<String>,
}

fn at(step: u64, phase: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Step {
        step,
        phase,
        source: Box::new(e),
    }
}

type TaskBatches<'a> = BTreeMap<TaskId, Vec<PromptBatch<'a>>>;

fn task_gradients(
    ctx: &TrainContext,
    batches: &TaskBatches<'_>,
    params: &PolicyParams,
    ref_params: &PolicyParams,
    betas: &BTreeMap<TaskId, f64>,
) -> Result<Vec<(TaskId, TaskLossBreakdown, Gradient)>> {
    let opt = &ctx.config.optimizer;
    batches
        .par_iter()
        .map(|(k, batch)| {
            let (b, g) = task_objective_with_grad(batch, params, ref_params, betas[k], opt.clip_eps, opt.ratio_baseline)?;
            Ok((*k, b, g))
        })
        .collect()
}

/// Run one step of training. Pure: returns the next state and its record.
pub fn train_step(ctx: &TrainContext, state: &TrainState) -> Result<(TrainState, StepRecord)> {
    let t = state.step + 1;
    let cfg = &ctx.config;
    let mut ledger = state.ledger.clone();

    // Phase 1: fold step t-1 statistics into the task EMAs.
    ledger.fold_task_statistics(t);
    let utilities = ledger.task_utilities();
    if let Some(bad) = ledger.tasks.values().find_map(|l| l.folded_from_step.filter(|&s| s >= t)) {
        return Err(at(t, "utility")(Error::Numeric(format!("statistics from step {bad} leaked into step {t}"))));
    }

    // Phases 2-3: quotas, prompt utilities, prompt sampling.
    ledger.fold_prompt_statistics(t);
    let decision: ScheduleDecision =
        schedule_from_utilities(&ledger, utilities.clone(), &ctx.tasks, cfg.budget, cfg.tau, t, state.seed, ctx.mode)
            .map_err(at(t, "schedule"))?;
    for w in &decision.warnings {
        debug!("step {t}: {w}");
    }

    // Phase 4: save the old policy, then sample and score rollouts per prompt.
    let old_params = state.params.clone();
    let jobs: Vec<(TaskId, PromptId)> = decision
        .selected_prompts
        .iter()
        .flat_map(|(k, qs)| qs.iter().map(move |q| (*k, *q)))
        .collect();
    let groups: Vec<RolloutGroup> = jobs
        .par_iter()
        .map(|&(k, q)| {
            let task = &ctx.tasks[k.0];
            let prompt = task.prompt(q)?;
            let seed = stream_seed(state.seed, Stream::Rollout, &[t, k.0 as u64, q.0 as u64]);
            let group = sample_rollouts(&old_params, prompt, cfg.group_size, seed)?;
            let flags = synthetic_format_flags(task, &group);
            score_rollouts(task, group, &flags)
        })
        .collect::<Result<_>>()
        .map_err(at(t, "rollouts"))?;

    let mut batches: TaskBatches<'_> = BTreeMap::new();
    for (&(k, q), group) in jobs.iter().zip(&groups) {
        let prompt = ctx.tasks[k.0].prompt(q).map_err(at(t, "rollouts"))?;
        batches.entry(k).or_default().push((prompt, group));
    }

    // Phase 5: per-task KL coefficients, objectives, one update.
    let betas: BTreeMap<TaskId, f64> = ctx
        .tasks
        .iter()
        .map(|task| {
            let u = utilities[&task.task_id].combined;
            (task.task_id, dynamic_kl_coefficient(task.beta_base, ctx.lambda, u))
        })
        .collect();
    let results = task_gradients(ctx, &batches, &state.params, &state.ref_params, &betas).map_err(at(t, "objective"))?;
    let mut total = state.params.zeros_like();
    let mut losses = BTreeMap::new();
    for (k, mut breakdown, grad) in results {
        let weight = decision.integer_quotas[&k] as f64 / cfg.budget as f64;
        breakdown.quota_weight = weight;
        total.axpy(weight, &grad);
        losses.insert(k, breakdown);
    }
    let objective = multitask_objective(&losses, &decision.integer_quotas, cfg.budget);
    let grad_norm = total.norm();
    let (params, optimizer_state) =
        optimizer_step(&state.params, &total, &state.optimizer_state, &cfg.optimizer).map_err(at(t, "update"))?;

    // Phase 6: gradients at the updated parameters feed the synergy EMAs;
    // rewards feed the potential and prompt statistics.
    let post = task_gradients(ctx, &batches, &params, &state.ref_params, &betas).map_err(at(t, "synergy"))?;
    let compressed: Vec<(TaskId, CompressedGradient)> =
        post.iter().map(|(k, _, g)| (*k, compress_gradient(g))).collect();
    for (k, c) in &compressed {
        ledger.gradient_ema_update(*k, c).map_err(at(t, "synergy"))?;
    }
    let emas = ledger.gradient_emas();

    let mut task_records = Vec::with_capacity(ctx.tasks.len());
    for task in &ctx.tasks {
        let k = task.task_id;
        let synergy = task_synergy(k, &emas).map_err(at(t, "synergy"))?;
        let (mut potential, mut mean_reward, mut variance) = (None, None, None);
        if let Some(batch) = batches.get(&k) {
            let per_prompt: Vec<f64> =
                batch.iter().map(|(_, g)| reward_variance(&g.rewards)).collect::<Result<_>>().map_err(at(t, "utility"))?;
            potential = Some(task_potential(&per_prompt));
            let all: Vec<f64> = batch.iter().flat_map(|(_, g)| g.rewards.iter().copied()).collect();
            mean_reward = Some(all.iter().sum::<f64>() / all.len() as f64);
            variance = Some(reward_variance(&all).map_err(at(t, "utility"))?);
            for (prompt, group) in batch {
                ledger
                    .record_prompt(k, prompt.prompt_id, t, &group.rewards)
                    .map_err(at(t, "utility"))?;
            }
        }
        ledger.record_task(k, t, potential, synergy).map_err(at(t, "utility"))?;
        let quota = decision.integer_quotas[&k];
        task_records.push(TaskStepRecord {
            task_id: k,
            utility: utilities[&k],
            fractional_quota: decision.fractional_quotas[&k],
            integer_quota: quota,
            rollouts: batches.get(&k).map_or(0, |b| b.iter().map(|(_, g)| g.len()).sum()),
            beta: betas[&k],
            loss: losses.get(&k).copied(),
            mean_reward,
            reward_variance: variance,
            potential,
            synergy,
        });
    }
    ledger.step = t;

    let ids = ctx.task_ids();
    let mut similarity = Vec::new();
    for (a, i) in ids.iter().enumerate() {
        for j in &ids[a + 1..] {
            similarity.push((*i, *j, cosine_similarity(&emas[i], &emas[j]).map_err(at(t, "synergy"))?));
        }
    }

    let mut prompts = Vec::new();
    for (k, weights) in &decision.prompt_weights {
        let chosen = &decision.selected_prompts[k];
        for (q, w) in weights {
            prompts.push(PromptRecord {
                task_id: *k,
                prompt_id: *q,
                weight: *w,
                selected: chosen.contains(q),
            });
        }
    }

    let next = TrainState {
        step: t,
        params,
        old_params,
        ref_params: state.ref_params.clone(),
        ledger,
        optimizer_state,
        seed: state.seed,
    };
    let record = StepRecord {
        step: t,
        tasks: task_records,
        similarity,
        prompts,
        objective,
        grad_norm,
        warnings: decision.warnings,
    };
    Ok((next, record))
}

/// Step until `ctx.config.steps`, handing every record to `observer`.
pub fn run<F>(ctx: &TrainContext, mut state: TrainState, mut observer: F) -> Result<TrainState>
where
    F: FnMut(&TrainState, &StepRecord) -> Result<()>,
{
    while state.step < ctx.config.steps {
        let (next, record) = train_step(ctx, &state)?;
        observer(&next, &record)?;
        state = next;
    }
    Ok(state)
}

/// Mean fused reward per task over `n_rollouts` fresh samples of every prompt.
pub fn evaluate(
    params: &PolicyParams,
    tasks: &[TaskSpec],
    n_rollouts: usize,
    seed: u64,
) -> Result<BTreeMap<TaskId, f64>> {
    tasks
        .iter()
        .map(|task| {
            let k = task.task_id;
            let means: Vec<f64> = task
                .prompt_pool
                .par_iter()
                .map(|prompt| {
                    let s = stream_seed(seed, Stream::Evaluation, &[k.0 as u64, prompt.prompt_id.0 as u64]);
                    let group = sample_rollouts(params, prompt, n_rollouts, s)?;
                    let flags = synthetic_format_flags(task, &group);
                    Ok(score_rollouts(task, group, &flags)?.mean_reward())
                })
                .collect::<Result<_>>()?;
            Ok((k, means.iter().sum::<f64>() / means.len() as f64))
        })
        .collect()
}

/// Mean fused reward per task of the greedy (per-position argmax) output.
pub fn evaluate_greedy(params: &PolicyParams, tasks: &[TaskSpec]) -> Result<BTreeMap<TaskId, f64>> {
    tasks
        .iter()
        .map(|task| {
            let mut total = 0.0;
            for prompt in &task.prompt_pool {
                let seq = greedy_sequence(params, prompt)?;
                total += task.reward(prompt.prompt_id, &seq)?;
            }
            Ok((task.task_id, total / task.prompt_pool.len() as f64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub sampled: BTreeMap<TaskId, f64>,
    pub greedy: BTreeMap<TaskId, f64>,
    /// Task-averaged sampled reward.
    pub mean_sampled: f64,
    pub mean_greedy: f64,
}

pub fn summarize(ctx: &TrainContext, state: &TrainState) -> Result<TrainSummary> {
    let sampled = evaluate(&state.params, &ctx.tasks, ctx.config.eval.rollouts, ctx.eval_seed())?;
    let greedy = evaluate_greedy(&state.params, &ctx.tasks)?;
    let mean = |m: &BTreeMap<TaskId, f64>| m.values().sum::<f64>() / m.len() as f64;
    Ok(TrainSummary {
        steps: state.step,
        mean_sampled: mean(&sampled),
        mean_greedy: mean(&greedy),
        sampled,
        greedy,
    })
}

/// Train from scratch for `config.steps` steps.
pub fn train(config: RunConfig) -> Result<(PolicyParams, TrainSummary)> {
    let ctx = TrainContext::new(config)?;
    let state = run(&ctx, ctx.initial_state()?, |_, _| Ok(()))?;
    let summary = summarize(&ctx, &state)?;
    Ok((state.params, summary))
}
