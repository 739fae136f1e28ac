//! Task- and prompt-level utility estimation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::policy::Gradient;
use crate::{PromptId, TaskId};

/// Denominator guard for normalization and cosine similarity.
pub const EPS: f64 = 1e-8;

/// Population variance of a reward group.
pub fn reward_variance(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(invalid("reward variance of an empty group"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    Ok(rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n)
}

/// Mean of per-prompt reward variances over a task's sampled prompts.
pub fn task_potential(variances: &[f64]) -> f64 {
    if variances.is_empty() {
        return 0.0;
    }
    variances.iter().sum::<f64>() / variances.len() as f64
}

pub fn prompt_potential(rewards: &[f64]) -> Result<f64> {
    reward_variance(rewards)
}

/// Change in a prompt's mean reward since its previous sampling; 0 on first sight.
pub fn prompt_progress(current_mean: f64, last_mean: Option<f64>) -> f64 {
    match last_mean {
        Some(last) => current_mean - last,
        None => 0.0,
    }
}

pub fn ema_update(prev: f64, new_value: f64, alpha: f64) -> f64 {
    alpha * new_value + (1.0 - alpha) * prev
}

/// Min-max normalization to [0, 1].
pub fn normalize_unit(values: &[f64]) -> Vec<f64> {
    normalize_unit_eps(values, EPS)
}

pub fn normalize_unit_eps(values: &[f64], eps: f64) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values.iter().map(|v| (v - min) / (max - min + eps)).collect()
}

/// Min-max normalization to [-1, 1]: `2 * unit - 1`.
pub fn normalize_signed(values: &[f64]) -> Vec<f64> {
    normalize_unit(values).into_iter().map(|u| 2.0 * u - 1.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOffset {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Per-task gradient reduced to one direction vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedGradient {
    pub vector: Vec<f64>,
    pub layer_offsets: Vec<LayerOffset>,
}

impl CompressedGradient {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn offset(&self, name: &str) -> Option<&LayerOffset> {
        self.layer_offsets.iter().find(|o| o.name == name)
    }
}

/// Sum each layer over all but its last axis and concatenate in layer order.
pub fn compress_gradient(grad: &Gradient) -> CompressedGradient {
    let mut vector = Vec::new();
    let mut layer_offsets = Vec::new();
    for layer in grad.layers() {
        let row = layer.tensor.reduce_to_last();
        layer_offsets.push(LayerOffset {
            name: layer.name.clone(),
            start: vector.len(),
            len: row.len(),
        });
        vector.extend(row);
    }
    CompressedGradient { vector, layer_offsets }
}

/// Cosine similarity `<u, v> / max(|u| |v|, eps)`, clamped to [-1, 1].
///
/// The norm product is taken as `sqrt(|u|^2 |v|^2)`; since `sqrt(x * x) == x`
/// in IEEE arithmetic, identical and negated vectors give exactly 1 and -1.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(invalid(format!("cosine of vectors with dims {} and {}", u.len(), v.len())));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let uu: f64 = u.iter().map(|a| a * a).sum();
    let vv: f64 = v.iter().map(|a| a * a).sum();
    Ok((dot / (uu * vv).sqrt().max(EPS)).clamp(-1.0, 1.0))
}

/// Mean cosine between task `k`'s gradient and every other task's.
/// A lone task has synergy 0.
pub fn task_synergy(k: TaskId, grads: &BTreeMap<TaskId, Vec<f64>>) -> Result<f64> {
    let own = grads
        .get(&k)
        .ok_or_else(|| invalid(format!("no gradient for task {k}")))?;
    let others: Vec<&Vec<f64>> = grads.iter().filter(|(j, _)| **j != k).map(|(_, g)| g).collect();
    if others.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for g in &others {
        sum += cosine_similarity(own, g)?;
    }
    Ok(sum / others.len() as f64)
}

/// Smoothed state of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLedger {
    pub ema_pot: f64,
    pub ema_syn: f64,
    pub grad_ema: Vec<f64>,
    /// Instantaneous statistics waiting to be folded into the EMAs: (step, pot, syn).
    pub pending: Option<PendingTask>,
    /// Step whose statistics were last folded into the EMAs.
    pub folded_from_step: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendingTask {
    pub step: u64,
    /// `None` when the task received no prompts that step.
    pub potential: Option<f64>,
    pub synergy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLedger {
    pub ema_pot: f64,
    pub ema_prog: f64,
    pub last_mean_reward: Option<f64>,
    pub last_seen_step: Option<u64>,
    pub pending: Option<PendingPrompt>,
    pub folded_from_step: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendingPrompt {
    pub step: u64,
    pub potential: f64,
    pub progress: f64,
}

/// All EMA state driving the scheduler and the KL calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityLedger {
    pub alpha: f64,
    pub step: u64,
    pub tasks: BTreeMap<TaskId, TaskLedger>,
    /// Serialized as a list since JSON object keys must be strings.
    #[serde(with = "prompt_map")]
    pub prompts: BTreeMap<(TaskId, PromptId), PromptLedger>,
}

mod prompt_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        task_id: TaskId,
        prompt_id: PromptId,
        #[serde(flatten)]
        state: PromptLedger,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<(TaskId, PromptId), PromptLedger>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(&(task_id, prompt_id), state)| Entry {
                task_id,
                prompt_id,
                state: state.clone(),
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<(TaskId, PromptId), PromptLedger>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries
            .into_iter()
            .map(|e| ((e.task_id, e.prompt_id), e.state))
            .collect())
    }
}

/// Normalized components and combined utility of one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskUtility {
    pub ema_pot: f64,
    pub ema_syn: f64,
    pub pot_norm: f64,
    pub syn_norm: f64,
    pub combined: f64,
}

impl UtilityLedger {
    /// Cold-start ledger: zero EMAs and zero gradient EMAs of dimension `grad_dim`.
    pub fn new(task_ids: &[TaskId], grad_dim: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(invalid(format!("alpha {alpha} outside (0, 1]")));
        }
        Ok(UtilityLedger {
            alpha,
            step: 0,
            tasks: task_ids
                .iter()
                .map(|&k| {
                    (
                        k,
                        TaskLedger {
                            ema_pot: 0.0,
                            ema_syn: 0.0,
                            grad_ema: vec![0.0; grad_dim],
                            pending: None,
                            folded_from_step: None,
                        },
                    )
                })
                .collect(),
            prompts: BTreeMap::new(),
        })
    }

    fn task_mut(&mut self, k: TaskId) -> Result<&mut TaskLedger> {
        self.tasks
            .get_mut(&k)
            .ok_or_else(|| invalid(format!("ledger has no task {k}")))
    }

    /// `g_ema <- alpha g + (1 - alpha) g_ema`
    pub fn gradient_ema_update(&mut self, k: TaskId, grad: &CompressedGradient) -> Result<()> {
        let alpha = self.alpha;
        let entry = self.task_mut(k)?;
        if entry.grad_ema.len() != grad.dim() {
            return Err(invalid(format!(
                "gradient dim {} != ledger dim {}",
                grad.dim(),
                entry.grad_ema.len()
            )));
        }
        for (e, g) in entry.grad_ema.iter_mut().zip(&grad.vector) {
            *e = ema_update(*e, *g, alpha);
        }
        Ok(())
    }

    pub fn gradient_emas(&self) -> BTreeMap<TaskId, Vec<f64>> {
        self.tasks.iter().map(|(k, t)| (*k, t.grad_ema.clone())).collect()
    }

    /// Record instantaneous task statistics of `step` for folding at the next step.
    pub fn record_task(&mut self, k: TaskId, step: u64, potential: Option<f64>, synergy: f64) -> Result<()> {
        self.task_mut(k)?.pending = Some(PendingTask {
            step,
            potential,
            synergy,
        });
        Ok(())
    }

    /// Record a sampled prompt's rewards of `step`. Progress is measured
    /// against the prompt's previous sampling.
    pub fn record_prompt(&mut self, k: TaskId, q: PromptId, step: u64, rewards: &[f64]) -> Result<()> {
        let potential = prompt_potential(rewards)?;
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let entry = self.prompts.entry((k, q)).or_insert(PromptLedger {
            ema_pot: 0.0,
            ema_prog: 0.0,
            last_mean_reward: None,
            last_seen_step: None,
            pending: None,
            folded_from_step: None,
        });
        let progress = prompt_progress(mean, entry.last_mean_reward);
        entry.last_mean_reward = Some(mean);
        entry.last_seen_step = Some(step);
        entry.pending = Some(PendingPrompt {
            step,
            potential,
            progress,
        });
        Ok(())
    }

    /// Fold every pending task statistic from steps before `step` into the EMAs.
    pub fn fold_task_statistics(&mut self, step: u64) {
        let alpha = self.alpha;
        for t in self.tasks.values_mut() {
            if let Some(p) = t.pending {
                if p.step < step {
                    if let Some(pot) = p.potential {
                        t.ema_pot = ema_update(t.ema_pot, pot, alpha);
                    }
                    t.ema_syn = ema_update(t.ema_syn, p.synergy, alpha);
                    t.folded_from_step = Some(p.step);
                    t.pending = None;
                }
            }
        }
        self.step = self.step.max(step);
    }

    /// Fold every pending prompt statistic from steps before `step`.
    pub fn fold_prompt_statistics(&mut self, step: u64) {
        let alpha = self.alpha;
        for pr in self.prompts.values_mut() {
            if let Some(p) = pr.pending {
                if p.step < step {
                    pr.ema_pot = ema_update(pr.ema_pot, p.potential, alpha);
                    pr.ema_prog = ema_update(pr.ema_prog, p.progress, alpha);
                    pr.folded_from_step = Some(p.step);
                    pr.pending = None;
                }
            }
        }
    }

    /// Normalized potential ([0,1]) plus normalized synergy ([-1,1]) for all tasks.
    pub fn task_utilities(&self) -> BTreeMap<TaskId, TaskUtility> {
        let ids: Vec<TaskId> = self.tasks.keys().copied().collect();
        let pots: Vec<f64> = self.tasks.values().map(|t| t.ema_pot).collect();
        let syns: Vec<f64> = self.tasks.values().map(|t| t.ema_syn).collect();
        let pn = normalize_unit(&pots);
        let sn = normalize_signed(&syns);
        ids.into_iter()
            .enumerate()
            .map(|(i, k)| {
                (
                    k,
                    TaskUtility {
                        ema_pot: pots[i],
                        ema_syn: syns[i],
                        pot_norm: pn[i],
                        syn_norm: sn[i],
                        combined: pn[i] + sn[i],
                    },
                )
            })
            .collect()
    }

    pub fn combined_task_utility(&self, k: TaskId) -> Result<f64> {
        self.task_utilities()
            .get(&k)
            .map(|u| u.combined)
            .ok_or_else(|| invalid(format!("ledger has no task {k}")))
    }

    /// Utilities of every tracked prompt of task `k`, normalized within the task.
    pub fn prompt_utilities(&self, k: TaskId) -> BTreeMap<PromptId, f64> {
        let tracked: Vec<(PromptId, &PromptLedger)> = self
            .prompts
            .range((k, PromptId(0))..=(k, PromptId(usize::MAX)))
            .map(|((_, q), p)| (*q, p))
            .collect();
        let pots: Vec<f64> = tracked.iter().map(|(_, p)| p.ema_pot).collect();
        let progs: Vec<f64> = tracked.iter().map(|(_, p)| p.ema_prog).collect();
        let pn = normalize_unit(&pots);
        let gn = normalize_signed(&progs);
        tracked
            .iter()
            .enumerate()
            .map(|(i, (q, _))| (*q, pn[i] + gn[i]))
            .collect()
    }

    /// Combined utility of prompt `q` in task `k`; untracked prompts score 0.
    pub fn combined_prompt_utility(&self, k: TaskId, q: PromptId) -> f64 {
        self.prompt_utilities(k).get(&q).copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyParams;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn variance_examples() {
        assert_eq!(reward_variance(&[1.0; 4]).unwrap(), 0.0);
        assert_eq!(reward_variance(&[0.0, 1.0]).unwrap(), 0.25);
        assert!(reward_variance(&[]).is_err());
        let mut rng = rng_from_seed(1);
        for _ in 0..1000 {
            let n = rng.random_range(1..20);
            let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 0.5).collect();
            // two-pass oracle
            let mut mean = 0.0;
            for x in &xs {
                mean += x;
            }
            mean /= n as f64;
            let mut ss = 0.0;
            for x in &xs {
                ss += (x - mean).powi(2);
            }
            assert!(close(reward_variance(&xs).unwrap(), ss / n as f64, 1e-12));
        }
    }

    #[test]
    fn potential_examples() {
        assert_eq!(task_potential(&[0.0, 0.0]), 0.0);
        assert_eq!(task_potential(&[0.3]), 0.3);
        assert!(close(task_potential(&[0.25, 0.0, 0.15]), 0.4 / 3.0, 1e-15));
        assert_eq!(prompt_potential(&[0.0, 1.0]).unwrap(), 0.25);
    }

    #[test]
    fn progress_examples() {
        assert!(close(prompt_progress(0.7, Some(0.4)), 0.3, 1e-15));
        assert_eq!(prompt_progress(0.5, None), 0.0);
        assert!(close(prompt_progress(0.2, Some(0.6)), -0.4, 1e-15));
    }

    #[test]
    fn ema_examples() {
        assert!(close(ema_update(0.0, 1.0, 0.9), 0.9, 1e-15));
        assert_eq!(ema_update(0.37, 0.37, 0.9), 0.37);
        let (c, mut x) = (2.5, -1.0);
        for n in 1..30 {
            x = ema_update(x, c, 0.9);
            assert!((x - c).abs() <= 3.5 * 0.1f64.powi(n) + 1e-15);
        }
    }

    #[test]
    fn normalization_examples() {
        let u = normalize_unit(&[2.0, 4.0, 6.0]);
        for (a, b) in u.iter().zip([0.0, 0.5, 1.0]) {
            assert!(close(*a, b, 1e-7));
        }
        assert!(normalize_unit(&[3.0; 4]).iter().all(|&x| x == 0.0));
        assert_eq!(normalize_unit(&[5.0]), vec![0.0]);
        let s = normalize_signed(&[2.0, 4.0, 6.0]);
        for (a, b) in s.iter().zip([-1.0, 0.0, 1.0]) {
            assert!(close(*a, b, 1e-7));
        }
        assert!(normalize_signed(&[3.0; 4]).iter().all(|&x| x == -1.0));
    }

    #[test]
    fn compression_examples() {
        let mut g = PolicyParams::zeros(3, 2, 4).unwrap();
        // weights (L=2, V=3, F=4) of ones -> [6, 6, 6, 6]; bias [a, b, c] passes through
        g.weights_mut().data_mut().fill(1.0);
        g.bias_mut().data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let c = compress_gradient(&g);
        assert_eq!(c.vector, vec![6.0, 6.0, 6.0, 6.0, 0.5, -1.0, 2.0]);
        assert_eq!(c.dim(), 4 + 3);
        assert_eq!(c.offset("weights").unwrap().len, 4);
        assert_eq!(c.offset("bias").unwrap().start, 4);

        let t = crate::tensor::Tensor::from_vec(&[3, 4], vec![1.0; 12]).unwrap();
        assert_eq!(t.reduce_to_last(), vec![3.0; 4]);
    }

    #[test]
    fn compressed_dim_matches_layer_shapes() {
        for (v, l, f) in [(2, 1, 1), (3, 2, 5), (7, 4, 3)] {
            let g = PolicyParams::zeros(v, l, f).unwrap();
            let c = compress_gradient(&g);
            let expected: usize = g.layers().iter().map(|x| x.tensor.last_dim()).sum();
            assert_eq!(c.dim(), expected);
            assert_eq!(c.dim(), f + v);
            assert_eq!(c.layer_offsets.iter().map(|o| o.len).sum::<usize>(), c.dim());
        }
    }

    #[test]
    fn cosine_examples() {
        let g = vec![0.3, -1.2, 4.0];
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert_eq!(cosine_similarity(&g, &g).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&g, &neg).unwrap(), -1.0);
        assert_eq!(cosine_similarity(&[0.0; 3], &g).unwrap(), 0.0);
        assert!(cosine_similarity(&g, &[1.0]).is_err());
    }

    #[test]
    fn synergy_examples() {
        let g = vec![1.0, 2.0, -0.5];
        let two: BTreeMap<_, _> = [(TaskId(0), g.clone()), (TaskId(1), g.clone())].into();
        assert_eq!(task_synergy(TaskId(0), &two).unwrap(), 1.0);

        let three: BTreeMap<_, _> = [
            (TaskId(0), vec![1.0, 0.0, 0.0]),
            (TaskId(1), vec![0.0, 1.0, 0.0]),
            (TaskId(2), vec![0.0, 0.3, -2.0]),
        ]
        .into();
        assert_eq!(task_synergy(TaskId(0), &three).unwrap(), 0.0);

        let mut rng = rng_from_seed(5);
        let vs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let map: BTreeMap<_, _> = vs.iter().cloned().enumerate().map(|(i, v)| (TaskId(i), v)).collect();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb).max(EPS)
        };
        let expected = (cos(&vs[0], &vs[1]) + cos(&vs[0], &vs[2])) / 2.0;
        assert!(close(task_synergy(TaskId(0), &map).unwrap(), expected, 1e-12));

        let lone: BTreeMap<_, _> = [(TaskId(0), g)].into();
        assert_eq!(task_synergy(TaskId(0), &lone).unwrap(), 0.0);
    }

    #[test]
    fn gradient_ema_examples() {
        let mut ledger = UtilityLedger::new(&[TaskId(0)], 3, 0.9).unwrap();
        let g = CompressedGradient {
            vector: vec![1.0, -2.0, 0.5],
            layer_offsets: vec![],
        };
        ledger.gradient_ema_update(TaskId(0), &g).unwrap();
        let got = ledger.tasks[&TaskId(0)].grad_ema.clone();
        for (a, b) in got.iter().zip(&g.vector) {
            assert!(close(*a, 0.9 * b, 1e-15));
        }
        for _ in 0..40 {
            ledger.gradient_ema_update(TaskId(0), &g).unwrap();
        }
        for (a, b) in ledger.tasks[&TaskId(0)].grad_ema.iter().zip(&g.vector) {
            assert!(close(*a, *b, 1e-12));
        }
        let bad = CompressedGradient {
            vector: vec![1.0],
            layer_offsets: vec![],
        };
        assert!(ledger.gradient_ema_update(TaskId(0), &bad).is_err());
        assert!(UtilityLedger::new(&[TaskId(0)], 1, 0.0).is_err());
    }

    #[test]
    fn gradient_ema_is_coordinatewise_scalar_ema() {
        let mut rng = rng_from_seed(8);
        let mut ledger = UtilityLedger::new(&[TaskId(2)], 5, 0.7).unwrap();
        let mut scalar = vec![0.0; 5];
        for _ in 0..10 {
            let v: Vec<f64> = (0..5).map(|_| rng.random::<f64>() - 0.5).collect();
            for (s, x) in scalar.iter_mut().zip(&v) {
                *s = ema_update(*s, *x, 0.7);
            }
            ledger
                .gradient_ema_update(TaskId(2), &CompressedGradient { vector: v, layer_offsets: vec![] })
                .unwrap();
        }
        assert_eq!(ledger.tasks[&TaskId(2)].grad_ema, scalar);
    }

    fn random_ledger(seed: u64, k: usize) -> UtilityLedger {
        let ids: Vec<TaskId> = (0..k).map(TaskId).collect();
        let mut ledger = UtilityLedger::new(&ids, 2, 0.9).unwrap();
        let mut rng = rng_from_seed(seed);
        for t in ledger.tasks.values_mut() {
            t.ema_pot = rng.random::<f64>() * 0.25;
            t.ema_syn = rng.random::<f64>() * 2.0 - 1.0;
        }
        ledger
    }

    #[test]
    fn combined_task_utility_matches_recomputation() {
        for seed in 0..50 {
            let ledger = random_ledger(seed, 4);
            let pots: Vec<f64> = ledger.tasks.values().map(|t| t.ema_pot).collect();
            let syns: Vec<f64> = ledger.tasks.values().map(|t| t.ema_syn).collect();
            let (pmin, pmax) = (pots.iter().cloned().fold(f64::MAX, f64::min), pots.iter().cloned().fold(f64::MIN, f64::max));
            let (smin, smax) = (syns.iter().cloned().fold(f64::MAX, f64::min), syns.iter().cloned().fold(f64::MIN, f64::max));
            for k in 0..4 {
                let expected = (pots[k] - pmin) / (pmax - pmin + 1e-8)
                    + 2.0 * (syns[k] - smin) / (smax - smin + 1e-8)
                    - 1.0;
                let got = ledger.combined_task_utility(TaskId(k)).unwrap();
                assert!(close(got, expected, 1e-12));
                assert!((-1.0..=2.0).contains(&got));
            }
        }
    }

    #[test]
    fn identical_tasks_get_identical_utilities() {
        let mut ledger = UtilityLedger::new(&[TaskId(0), TaskId(1), TaskId(2)], 1, 0.9).unwrap();
        for t in ledger.tasks.values_mut() {
            t.ema_pot = 0.1;
            t.ema_syn = 0.3;
        }
        let u = ledger.task_utilities();
        assert!(u.values().all(|x| x.combined == u[&TaskId(0)].combined));
    }

    #[test]
    fn prompt_utilities_match_recomputation() {
        let mut ledger = UtilityLedger::new(&[TaskId(0), TaskId(1)], 1, 0.9).unwrap();
        let mut rng = rng_from_seed(3);
        for step in 1..4u64 {
            for q in 0..5 {
                let rewards: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
                ledger.record_prompt(TaskId(0), PromptId(q), step, &rewards).unwrap();
            }
            ledger.fold_prompt_statistics(step + 1);
        }
        ledger.record_prompt(TaskId(1), PromptId(0), 1, &[0.0, 1.0]).unwrap();
        let tracked: Vec<&PromptLedger> = (0..5).map(|q| &ledger.prompts[&(TaskId(0), PromptId(q))]).collect();
        let pots: Vec<f64> = tracked.iter().map(|p| p.ema_pot).collect();
        let progs: Vec<f64> = tracked.iter().map(|p| p.ema_prog).collect();
        let pn = normalize_unit(&pots);
        let gn = normalize_signed(&progs);
        for q in 0..5 {
            let got = ledger.combined_prompt_utility(TaskId(0), PromptId(q));
            assert!(close(got, pn[q] + gn[q], 1e-15));
            assert!((-1.0..=2.0).contains(&got));
        }
        assert_eq!(ledger.combined_prompt_utility(TaskId(0), PromptId(40)), 0.0);
    }

    #[test]
    fn folding_respects_step_order() {
        let mut ledger = UtilityLedger::new(&[TaskId(0)], 1, 0.9).unwrap();
        ledger.record_task(TaskId(0), 3, Some(0.2), 0.5).unwrap();
        ledger.fold_task_statistics(3);
        assert_eq!(ledger.tasks[&TaskId(0)].ema_pot, 0.0);
        ledger.fold_task_statistics(4);
        assert!(close(ledger.tasks[&TaskId(0)].ema_pot, 0.18, 1e-15));
        assert!(close(ledger.tasks[&TaskId(0)].ema_syn, 0.45, 1e-15));
        assert_eq!(ledger.tasks[&TaskId(0)].folded_from_step, Some(3));
    }

    #[test]
    fn ledger_json_round_trip() {
        let mut ledger = random_ledger(9, 2);
        ledger.record_prompt(TaskId(1), PromptId(4), 1, &[0.25, 0.5]).unwrap();
        let text = serde_json::to_string(&ledger).unwrap();
        let back: UtilityLedger = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ledger);
    }

    proptest! {
        #[test]
        fn compression_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = rng_from_seed(seed);
            let mut g = PolicyParams::zeros(3, 2, 4).unwrap();
            let mut h = g.clone();
            for layer in g.layers_mut() { for x in layer.tensor.data_mut() { *x = rng.random::<f64>() - 0.5; } }
            for layer in h.layers_mut() { for x in layer.tensor.data_mut() { *x = rng.random::<f64>() - 0.5; } }
            let mut mix = g.zeros_like();
            mix.axpy(a, &g);
            mix.axpy(b, &h);
            let (cg, ch, cm) = (compress_gradient(&g), compress_gradient(&h), compress_gradient(&mix));
            for i in 0..cm.dim() {
                prop_assert!((cm.vector[i] - (a * cg.vector[i] + b * ch.vector[i])).abs() < 1e-10);
            }
        }

        #[test]
        fn normalization_preserves_order_and_range(xs in prop::collection::vec(-100.0f64..100.0, 1..12)) {
            let u = normalize_unit(&xs);
            let s = normalize_signed(&xs);
            for i in 0..xs.len() {
                prop_assert!((0.0..=1.0).contains(&u[i]));
                prop_assert!((-1.0..=1.0).contains(&s[i]));
                for j in 0..xs.len() {
                    if xs[i] < xs[j] {
                        prop_assert!(u[i] < u[j] && s[i] < s[j]);
                    }
                }
            }
        }

        #[test]
        fn synergy_is_scale_and_relabel_invariant(seed in 0u64..500, scale in 0.01f64..100.0) {
            let mut rng = rng_from_seed(seed);
            let vs: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
            let map: BTreeMap<_, _> = vs.iter().cloned().enumerate().map(|(i, v)| (TaskId(i), v)).collect();
            let base = task_synergy(TaskId(0), &map).unwrap();
            let mut scaled = map.clone();
            scaled.get_mut(&TaskId(2)).unwrap().iter_mut().for_each(|x| *x *= scale);
            prop_assert!((task_synergy(TaskId(0), &scaled).unwrap() - base).abs() < 1e-12);
            let relabeled: BTreeMap<_, _> = [(TaskId(0), vs[0].clone()), (TaskId(1), vs[3].clone()), (TaskId(2), vs[1].clone()), (TaskId(3), vs[2].clone())].into();
            prop_assert!((task_synergy(TaskId(0), &relabeled).unwrap() - base).abs() < 1e-12);
        }
    }
}
