//! GRPO objective with utility-calibrated KL and the parameter update.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policy::{kl_with_logit_grad, Gradient, PolicyParams, PromptContext, RolloutGroup};
use crate::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Denominator of the probability ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioBaseline {
    /// The policy saved before rollout generation.
    Old,
    /// The frozen reference policy.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub clip_eps: f64,
    pub grad_clip_norm: f64,
    pub update_rule: UpdateRule,
    pub schedule: LrSchedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub ratio_baseline: RatioBaseline,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.5,
            clip_eps: 0.2,
            grad_clip_norm: 1.0,
            update_rule: UpdateRule::Sgd,
            schedule: LrSchedule::Constant,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            ratio_baseline: RatioBaseline::Old,
        }
    }
}

impl OptimizerConfig {
    /// The LLM-scale settings: AdamW at 5e-7 with a cosine schedule.
    pub fn llm_preset() -> Self {
        OptimizerConfig {
            learning_rate: 5e-7,
            update_rule: UpdateRule::Adamw,
            schedule: LrSchedule::Cosine,
            weight_decay: 0.01,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(invalid(format!("clip_eps {} outside (0, 1)", self.clip_eps)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(invalid("grad_clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Per-task objective terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskLossBreakdown {
    pub surrogate: f64,
    pub kl_term: f64,
    pub beta_used: f64,
    pub objective: f64,
    pub quota_weight: f64,
}

/// `(r - mean) / (std + eps)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    rewards.iter().map(|r| (r - mean) / (std + eps)).collect()
}

pub const ADVANTAGE_EPS: f64 = 1e-8;

pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the unclipped branch is the one selected by the min.
fn surrogate_is_unclipped(ratio: f64, advantage: f64, clip_eps: f64) -> bool {
    if advantage >= 0.0 {
        ratio < 1.0 + clip_eps
    } else {
        ratio > 1.0 - clip_eps
    }
}

/// `max(0, beta_base * (1 + lambda * U))`.
pub fn dynamic_kl_coefficient(beta_base: f64, lambda: f64, task_utility: f64) -> f64 {
    (beta_base * (1.0 + lambda * task_utility)).max(0.0)
}

/// One prompt's scored rollouts, paired with the prompt they came from.
pub type PromptBatch<'a> = (&'a PromptContext, &'a RolloutGroup);

/// GRPO objective of one task.
pub fn task_objective(
    batch: &[PromptBatch<'_>],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    beta: f64,
    clip_eps: f64,
    baseline: RatioBaseline,
) -> Result<TaskLossBreakdown> {
    evaluate(batch, params, ref_params, beta, clip_eps, baseline, false).map(|(b, _)| b)
}

/// GRPO objective of one task and its exact gradient.
pub fn task_objective_with_grad(
    batch: &[PromptBatch<'_>],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    beta: f64,
    clip_eps: f64,
    baseline: RatioBaseline,
) -> Result<(TaskLossBreakdown, Gradient)> {
    evaluate(batch, params, ref_params, beta, clip_eps, baseline, true).map(|(b, g)| (b, g.expect("requested")))
}

fn evaluate(
    batch: &[PromptBatch<'_>],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    beta: f64,
    clip_eps: f64,
    baseline: RatioBaseline,
    with_grad: bool,
) -> Result<(TaskLossBreakdown, Option<Gradient>)> {
    if batch.is_empty() {
        return Err(invalid("task objective over an empty batch"));
    }
    if !params.same_shape(ref_params) {
        return Err(invalid("policy and reference shapes differ"));
    }
    let l_v = params.seq_len() * params.vocab_size();
    let n_prompts = batch.len() as f64;
    let mut grad = with_grad.then(|| params.zeros_like());
    let (mut surrogate, mut kl_total) = (0.0, 0.0);

    for (prompt, group) in batch {
        if !group.is_scored() || group.logprobs_behavior.len() != group.len() {
            return Err(invalid(format!("group for prompt {} is not scored", group.prompt_id)));
        }
        let table = params.log_prob_table(prompt)?;
        let ref_table = ref_params.log_prob_table(prompt)?;
        let advantages = group_advantages(&group.rewards, ADVANTAGE_EPS);
        let g = group.len() as f64;
        let mut dz = vec![0.0; l_v];
        let mut s = 0.0;
        for ((seq, adv), behavior) in group.sequences.iter().zip(&advantages).zip(&group.logprobs_behavior) {
            table.check_sequence(seq)?;
            let lp = table.sequence_log_prob(seq);
            let denom = match baseline {
                RatioBaseline::Old => *behavior,
                RatioBaseline::Reference => ref_table.sequence_log_prob(seq),
            };
            let ratio = (lp - denom).exp();
            if !ratio.is_finite() {
                return Err(Error::Numeric(format!("non-finite ratio for prompt {}", group.prompt_id)));
            }
            s += clipped_surrogate(ratio, *adv, clip_eps);
            if with_grad && *adv != 0.0 && surrogate_is_unclipped(ratio, *adv, clip_eps) {
                table.add_score_grad(seq, adv * ratio / g, &mut dz);
            }
        }
        surrogate += s / g;
        let (kl, kl_grad) = kl_with_logit_grad(&table, &ref_table);
        kl_total += kl;
        if let Some(grad) = grad.as_mut() {
            for (d, k) in dz.iter_mut().zip(&kl_grad) {
                *d -= beta * k;
            }
            grad.accumulate_logit_grad(&prompt.features, &dz, 1.0 / n_prompts);
        }
    }
    let surrogate = surrogate / n_prompts;
    let kl_term = kl_total / n_prompts;
    Ok((
        TaskLossBreakdown {
            surrogate,
            kl_term,
            beta_used: beta,
            objective: surrogate - beta * kl_term,
            quota_weight: 0.0,
        },
        grad,
    ))
}

/// `sum_k (N_k / B) J_k`; tasks without a breakdown contribute nothing.
pub fn multitask_objective(
    breakdowns: &BTreeMap<TaskId, TaskLossBreakdown>,
    quotas: &BTreeMap<TaskId, usize>,
    budget: usize,
) -> f64 {
    breakdowns
        .iter()
        .map(|(k, b)| quotas.get(k).copied().unwrap_or(0) as f64 / budget as f64 * b.objective)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    /// Horizon of the cosine schedule.
    pub total_steps: u64,
    pub first_moment: Option<Vec<f64>>,
    pub second_moment: Option<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(total_steps: u64) -> Self {
        OptimizerState {
            step: 0,
            total_steps,
            first_moment: None,
            second_moment: None,
        }
    }
}

pub fn scheduled_learning_rate(config: &OptimizerConfig, state: &OptimizerState) -> f64 {
    match config.schedule {
        LrSchedule::Constant => config.learning_rate,
        LrSchedule::Cosine => {
            let progress = if state.total_steps == 0 {
                0.0
            } else {
                (state.step as f64 / state.total_steps as f64).min(1.0)
            };
            config.learning_rate * 0.5 * (1.0 + (PI * progress).cos())
        }
    }
}

/// One ascent step on the objective: global-norm clipping, then SGD or AdamW.
pub fn optimizer_step(
    params: &PolicyParams,
    gradient: &Gradient,
    state: &OptimizerState,
    config: &OptimizerConfig,
) -> Result<(PolicyParams, OptimizerState)> {
    if !params.same_shape(gradient) {
        return Err(invalid("gradient shape differs from parameters"));
    }
    if !gradient.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let mut g = gradient.clone();
    let norm = g.norm();
    if norm > config.grad_clip_norm {
        g.scale(config.grad_clip_norm / norm);
    }
    let lr = scheduled_learning_rate(config, state);
    let mut next = params.clone();
    let mut new_state = state.clone();
    new_state.step += 1;
    match config.update_rule {
        UpdateRule::Sgd => next.axpy(lr, &g),
        UpdateRule::Adamw => {
            let flat_g = g.flat();
            let n = flat_g.len();
            let mut m = state.first_moment.clone().unwrap_or_else(|| vec![0.0; n]);
            let mut v = state.second_moment.clone().unwrap_or_else(|| vec![0.0; n]);
            let t = new_state.step as i32;
            let (b1, b2) = (config.adam_beta1, config.adam_beta2);
            let mut update = params.zeros_like();
            let mut values = Vec::with_capacity(n);
            let theta = params.flat();
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * flat_g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * flat_g[i] * flat_g[i];
                let m_hat = m[i] / (1.0 - b1.powi(t));
                let v_hat = v[i] / (1.0 - b2.powi(t));
                values.push(lr * (m_hat / (v_hat.sqrt() + config.adam_eps)) - lr * config.weight_decay * theta[i]);
            }
            let mut it = values.into_iter();
            for layer in update.layers_mut() {
                for x in layer.tensor.data_mut() {
                    *x = it.next().expect("sizes agree");
                }
            }
            next.axpy(1.0, &update);
            new_state.first_moment = Some(m);
            new_state.second_moment = Some(v);
        }
    }
    if !next.is_finite() {
        return Err(Error::Numeric("update produced non-finite parameters".into()));
    }
    Ok((next, new_state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{sample_rollouts, token_kl};
    use crate::rng::rng_from_seed;
    use crate::{PromptId, TaskId};
    use rand::Rng as _;

    #[test]
    fn advantage_examples() {
        assert!(group_advantages(&[0.3; 4], 1e-8).iter().all(|&a| a == 0.0));
        let a = group_advantages(&[0.0, 1.0], 1e-8);
        assert!((a[0] + 1.0).abs() < 1e-7 && (a[1] - 1.0).abs() < 1e-7);
        let mut rng = rng_from_seed(2);
        for _ in 0..100 {
            let r: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
            let a = group_advantages(&r, 1e-8);
            let mean = a.iter().sum::<f64>() / 8.0;
            let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0).sqrt();
            assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7);
        assert!((clipped_surrogate(2.0, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn kl_coefficient_examples() {
        assert!((dynamic_kl_coefficient(1e-2, 0.2, 0.0) - 1e-2).abs() < 1e-18);
        assert!((dynamic_kl_coefficient(1e-2, 0.2, 1.0) - 1.2e-2).abs() < 1e-18);
        assert!((dynamic_kl_coefficient(1e-4, 0.2, -1.0) - 0.8e-4).abs() < 1e-18);
        assert_eq!(dynamic_kl_coefficient(1e-2, 2.0, -1.0), 0.0);
        let mut last = f64::NEG_INFINITY;
        for i in -20..=20 {
            let b = dynamic_kl_coefficient(1e-2, 0.2, i as f64 / 10.0);
            assert!(b >= last);
            last = b;
        }
    }

    fn prompt(features: Vec<f64>) -> PromptContext {
        PromptContext {
            prompt_id: PromptId(0),
            task_id: TaskId(0),
            features,
        }
    }

    #[test]
    fn on_policy_objective_is_zero() {
        let mut params = PolicyParams::zeros(3, 2, 2).unwrap();
        params.bias_mut().data_mut().copy_from_slice(&[0.2, -0.4, 0.1]);
        let q = prompt(vec![1.0, -0.5]);
        let mut group = sample_rollouts(&params, &q, 4, 1).unwrap();
        group.rewards = vec![0.0, 1.0, 0.5, 0.25];
        let b = task_objective(&[(&q, &group)], &params, &params, 0.3, 0.2, RatioBaseline::Old).unwrap();
        assert!(b.objective.abs() < 1e-7);
        assert_eq!(b.kl_term, 0.0);
    }

    #[test]
    fn zero_beta_objective_is_surrogate() {
        let params = PolicyParams::zeros(3, 2, 2).unwrap();
        let mut reference = params.clone();
        reference.bias_mut().data_mut()[0] = 1.0;
        let q = prompt(vec![1.0, -0.5]);
        let mut group = sample_rollouts(&params, &q, 4, 1).unwrap();
        group.rewards = vec![0.0, 1.0, 0.5, 0.25];
        let b = task_objective(&[(&q, &group)], &params, &reference, 0.0, 0.2, RatioBaseline::Old).unwrap();
        assert_eq!(b.objective, b.surrogate);
        assert!(b.kl_term > 0.0);
    }

    #[test]
    fn two_rollout_hand_calculation() {
        // V=2, L=1, F=1, current policy logits z=[0, ln 3] -> p = [1/4, 3/4].
        // Behavior log-probs: ln(1/2) for both rollouts (old policy uniform).
        // Rewards [1, 0] -> advantages ~[+1, -1].
        // Rollout 0 (token 0): ratio = (1/4)/(1/2) = 0.5, A=+1 -> min(0.5, 0.8) = 0.5
        // Rollout 1 (token 1): ratio = (3/4)/(1/2) = 1.5, A=-1 -> min(-1.5, -1.2) = -1.5
        // surrogate = (0.5 - 1.5)/2 = -0.5
        // Reference uniform: KL = 1/4 ln(1/2) + 3/4 ln(3/2)
        let mut params = PolicyParams::zeros(2, 1, 1).unwrap();
        params.bias_mut().data_mut()[1] = 3.0f64.ln();
        let reference = PolicyParams::zeros(2, 1, 1).unwrap();
        let q = prompt(vec![0.0]);
        let group = RolloutGroup {
            prompt_id: PromptId(0),
            sequences: vec![vec![0], vec![1]],
            logprobs_behavior: vec![0.5f64.ln(); 2],
            rewards: vec![1.0, 0.0],
        };
        let beta = 0.1;
        let b = task_objective(&[(&q, &group)], &params, &reference, beta, 0.2, RatioBaseline::Old).unwrap();
        let adv = 0.5 / (0.5 + 1e-8);
        let expected_s = (0.5 * adv - 1.5 * adv) / 2.0;
        let expected_kl = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((b.surrogate - expected_s).abs() < 1e-12);
        assert!((b.kl_term - expected_kl).abs() < 1e-12);
        assert!((b.objective - (expected_s - beta * expected_kl)).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let params = PolicyParams::zeros(2, 1, 1).unwrap();
        assert!(task_objective(&[], &params, &params, 0.1, 0.2, RatioBaseline::Old).is_err());
    }

    fn fd_check(seed: u64, baseline: RatioBaseline) {
        let mut rng = rng_from_seed(seed);
        let (v, l, f, g) = (3, 2, 2, 4);
        let mut params = PolicyParams::zeros(v, l, f).unwrap();
        for layer in params.layers_mut() {
            for x in layer.tensor.data_mut() {
                *x = rng.random::<f64>() - 0.5;
            }
        }
        let mut old = params.clone();
        let mut reference = params.clone();
        for x in old.layers_mut().iter_mut().flat_map(|l| l.tensor.data_mut().iter_mut()) {
            *x += 0.05 * (rng.random::<f64>() - 0.5);
        }
        for x in reference.layers_mut().iter_mut().flat_map(|l| l.tensor.data_mut().iter_mut()) {
            *x += 0.3 * (rng.random::<f64>() - 0.5);
        }
        let prompts: Vec<PromptContext> = (0..2)
            .map(|i| PromptContext {
                prompt_id: PromptId(i),
                task_id: TaskId(0),
                features: (0..f).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
            })
            .collect();
        let groups: Vec<RolloutGroup> = prompts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut gr = sample_rollouts(&old, p, g, seed * 7 + i as u64).unwrap();
                gr.rewards = (0..g).map(|_| rng.random::<f64>()).collect();
                gr
            })
            .collect();
        let batch: Vec<PromptBatch<'_>> = prompts.iter().zip(&groups).collect();
        let beta = 0.5;
        // a wide clip keeps the check away from the kink
        let clip = 0.9;
        let (_, grad) = task_objective_with_grad(&batch, &params, &reference, beta, clip, baseline).unwrap();
        let h = 1e-5;
        for i in 0..params.num_parameters() {
            let mut plus = params.clone();
            plus.set_flat(i, params.get_flat(i) + h);
            let mut minus = params.clone();
            minus.set_flat(i, params.get_flat(i) - h);
            let jp = task_objective(&batch, &plus, &reference, beta, clip, baseline).unwrap().objective;
            let jm = task_objective(&batch, &minus, &reference, beta, clip, baseline).unwrap().objective;
            let fd = (jp - jm) / (2.0 * h);
            let an = grad.get_flat(i);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-5, "coord {i}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        for seed in 0..5 {
            fd_check(seed, RatioBaseline::Old);
        }
        fd_check(11, RatioBaseline::Reference);
    }

    #[test]
    fn multitask_examples() {
        let b = |j: f64| TaskLossBreakdown {
            surrogate: j,
            kl_term: 0.0,
            beta_used: 0.0,
            objective: j,
            quota_weight: 0.0,
        };
        let one: BTreeMap<_, _> = [(TaskId(0), b(0.37))].into();
        assert_eq!(multitask_objective(&one, &[(TaskId(0), 64)].into(), 64), 0.37);
        let two: BTreeMap<_, _> = [(TaskId(0), b(0.5)), (TaskId(1), b(9.0))].into();
        assert_eq!(multitask_objective(&two, &[(TaskId(0), 64), (TaskId(1), 0)].into(), 64), 0.5);
        let three: BTreeMap<_, _> = [(TaskId(0), b(0.2)), (TaskId(1), b(-0.4)), (TaskId(2), b(1.5))].into();
        let q: BTreeMap<_, _> = [(TaskId(0), 10), (TaskId(1), 20), (TaskId(2), 34)].into();
        let dot = 10.0 / 64.0 * 0.2 + 20.0 / 64.0 * -0.4 + 34.0 / 64.0 * 1.5;
        assert!((multitask_objective(&three, &q, 64) - dot).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_examples() {
        let params = PolicyParams::zeros(2, 1, 1).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            ..OptimizerConfig::default()
        };
        let state = OptimizerState::new(10);
        let (same, _) = optimizer_step(&params, &params.zeros_like(), &state, &cfg).unwrap();
        assert_eq!(same, params);

        // weights (1,2,1) and bias (2,): four ones, norm 2 -> clipped to 0.5 each
        let mut g = params.zeros_like();
        g.weights_mut().data_mut().fill(1.0);
        g.bias_mut().data_mut().fill(1.0);
        let (next, st) = optimizer_step(&params, &g, &state, &cfg).unwrap();
        assert!(next.flat().iter().all(|&x| (x - 0.05).abs() < 1e-15));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adamw_zero_gradient_only_decays() {
        let mut params = PolicyParams::zeros(2, 1, 1).unwrap();
        params.bias_mut().data_mut().fill(1.0);
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            update_rule: UpdateRule::Adamw,
            weight_decay: 0.5,
            ..OptimizerConfig::default()
        };
        let (next, _) = optimizer_step(&params, &params.zeros_like(), &OptimizerState::new(1), &cfg).unwrap();
        assert!(next.bias().data().iter().all(|&x| (x - 0.95).abs() < 1e-15));
        assert!(next.weights().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ascent_on_concave_quadratic() {
        // J(theta) = -|theta - c|^2, gradient -2 (theta - c)
        let mut theta = PolicyParams::zeros(2, 1, 1).unwrap();
        let c = [0.3, -0.2, 0.7, 0.1];
        let j = |p: &PolicyParams| -p.flat().iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            ..OptimizerConfig::default()
        };
        let mut state = OptimizerState::new(10);
        for _ in 0..5 {
            let mut g = theta.zeros_like();
            for (i, ci) in c.iter().enumerate() {
                g.set_flat(i, -2.0 * (theta.get_flat(i) - ci));
            }
            let before = j(&theta);
            let (next, st) = optimizer_step(&theta, &g, &state, &cfg).unwrap();
            assert!(j(&next) > before);
            theta = next;
            state = st;
        }
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let cfg = OptimizerConfig {
            schedule: LrSchedule::Cosine,
            ..OptimizerConfig::default()
        };
        let mut state = OptimizerState::new(100);
        assert_eq!(scheduled_learning_rate(&cfg, &state), cfg.learning_rate);
        state.step = 50;
        assert!((scheduled_learning_rate(&cfg, &state) - cfg.learning_rate / 2.0).abs() < 1e-15);
        state.step = 100;
        assert!(scheduled_learning_rate(&cfg, &state).abs() < 1e-15);
    }

    #[test]
    fn strong_kl_step_moves_toward_reference() {
        let reference = PolicyParams::zeros(3, 2, 2).unwrap();
        let mut params = reference.clone();
        params.bias_mut().data_mut().copy_from_slice(&[1.0, -0.5, 0.2]);
        let q = prompt(vec![0.6, -0.3]);
        let mut group = sample_rollouts(&params, &q, 4, 3).unwrap();
        group.rewards = vec![0.0, 1.0, 0.0, 1.0];
        let batch = [(&q, &group)];
        let (_, grad) = task_objective_with_grad(&batch, &params, &reference, 1e4, 0.2, RatioBaseline::Old).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.01,
            ..OptimizerConfig::default()
        };
        let (next, _) = optimizer_step(&params, &grad, &OptimizerState::new(1), &cfg).unwrap();
        assert!(token_kl(&next, &reference, &q).unwrap() < token_kl(&params, &reference, &q).unwrap());
    }
}
