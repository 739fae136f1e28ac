//! Hierarchical data scheduling: task quotas, then prompts within each task.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::TaskSpec;
use crate::error::{invalid, Result};
use crate::rng::{derive_seed, rng_from_seed, stream_seed, Stream};
use crate::utility::{TaskUtility, UtilityLedger};
use crate::{PromptId, TaskId};

/// `N_k = B * softmax(U / tau)_k`, computed with max-subtraction.
pub fn allocate_quotas(utilities: &BTreeMap<TaskId, f64>, budget: usize, tau: f64) -> Result<BTreeMap<TaskId, f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    if utilities.is_empty() {
        return Err(invalid("no tasks to allocate"));
    }
    if utilities.values().any(|u| !u.is_finite()) {
        return Err(invalid("non-finite task utility"));
    }
    if budget < utilities.len() {
        log::warn!("budget {budget} smaller than task count {}", utilities.len());
    }
    let max = utilities.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = utilities.values().map(|u| ((u - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(utilities
        .keys()
        .zip(exps)
        .map(|(k, e)| (*k, budget as f64 * e / z))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundedQuotas {
    pub quotas: BTreeMap<TaskId, usize>,
    pub warnings: Vec<String>,
}

/// Stochastic rounding in task-id order; the last task absorbs the residual
/// so the quotas sum to `budget`. If that would make it negative, the deficit
/// is taken from the largest quotas instead.
pub fn round_quotas(fractional: &BTreeMap<TaskId, f64>, budget: usize, seed: u64) -> Result<RoundedQuotas> {
    if fractional.is_empty() {
        return Err(invalid("no quotas to round"));
    }
    if fractional.values().any(|q| !q.is_finite() || *q < 0.0) {
        return Err(invalid("fractional quotas must be finite and non-negative"));
    }
    let total: f64 = fractional.values().sum();
    if (total - budget as f64).abs() > 1e-6 {
        return Err(invalid(format!("fractional quotas sum to {total}, expected {budget}")));
    }
    let mut rng = rng_from_seed(seed);
    let ids: Vec<TaskId> = fractional.keys().copied().collect();
    let mut rounded: Vec<i64> = fractional
        .values()
        .map(|&q| {
            let floor = q.floor();
            let frac = q - floor;
            let up = rng.random::<f64>() < frac;
            floor as i64 + i64::from(up)
        })
        .collect();
    let last = rounded.len() - 1;
    rounded[last] = budget as i64 - rounded[..last].iter().sum::<i64>();

    let mut warnings = Vec::new();
    if rounded[last] < 0 {
        let mut deficit = -rounded[last];
        rounded[last] = 0;
        warnings.push(format!(
            "last-task adjustment would be negative; redistributing deficit {deficit}"
        ));
        while deficit > 0 {
            let (i, _) = rounded
                .iter()
                .enumerate()
                .fold((0, i64::MIN), |best, (i, &q)| if q > best.1 { (i, q) } else { best });
            rounded[i] -= 1;
            deficit -= 1;
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(RoundedQuotas {
        quotas: ids.into_iter().zip(rounded.into_iter().map(|q| q as usize)).collect(),
        warnings,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `w(q) = sigmoid(U(q)) / sum sigmoid(U(q'))`.
pub fn prompt_weights(utilities: &BTreeMap<PromptId, f64>) -> BTreeMap<PromptId, f64> {
    let s: Vec<f64> = utilities.values().map(|&u| sigmoid(u)).collect();
    let z: f64 = s.iter().sum();
    utilities.keys().zip(s).map(|(q, x)| (*q, x / z)).collect()
}

/// Sequential weighted draws without replacement, renormalizing the
/// remaining mass after each draw.
pub fn sample_without_replacement(pool: &[PromptId], weights: &[f64], n: usize, seed: u64) -> Result<Vec<PromptId>> {
    if n > pool.len() {
        return Err(invalid(format!("cannot draw {n} prompts from a pool of {}", pool.len())));
    }
    if weights.len() != pool.len() {
        return Err(invalid("one weight per pool entry is required"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(invalid("weights must be finite and non-negative"));
    }
    let mut rng = rng_from_seed(seed);
    let mut remaining: Vec<f64> = weights.to_vec();
    let mut taken = vec![false; pool.len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = remaining.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut choice = None;
            for (i, w) in remaining.iter().enumerate() {
                if taken[i] || *w == 0.0 {
                    continue;
                }
                acc += w;
                choice = Some(i);
                if u < acc {
                    break;
                }
            }
            choice.expect("positive mass has a candidate")
        } else {
            // only zero-weight entries remain
            taken.iter().position(|t| !t).expect("n <= pool")
        };
        taken[pick] = true;
        remaining[pick] = 0.0;
        out.push(pool[pick]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleMode {
    /// Ignore task utilities and split the budget evenly.
    pub uniform_quotas: bool,
    /// Ignore prompt utilities and sample prompts uniformly.
    pub random_prompts: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub step: u64,
    pub fractional_quotas: BTreeMap<TaskId, f64>,
    pub integer_quotas: BTreeMap<TaskId, usize>,
    pub selected_prompts: BTreeMap<TaskId, Vec<PromptId>>,
    pub seed_used: u64,
    pub task_utilities: BTreeMap<TaskId, TaskUtility>,
    pub prompt_weights: BTreeMap<TaskId, BTreeMap<PromptId, f64>>,
    pub warnings: Vec<String>,
}

impl ScheduleDecision {
    pub fn check_invariants(&self, budget: usize) -> Result<()> {
        let total: usize = self.integer_quotas.values().sum();
        if total != budget {
            return Err(invalid(format!("quotas sum to {total}, expected {budget}")));
        }
        for (k, &n) in &self.integer_quotas {
            let sel = self.selected_prompts.get(k).map_or(0, Vec::len);
            if sel != n {
                return Err(invalid(format!("task {k}: {sel} prompts selected for quota {n}")));
            }
            let mut seen = self.selected_prompts.get(k).cloned().unwrap_or_default();
            seen.sort();
            seen.dedup();
            if seen.len() != n {
                return Err(invalid(format!("task {k}: duplicate prompt selected")));
            }
        }
        Ok(())
    }
}

/// Move quota above a task's pool size to tasks with spare prompts, one
/// unit at a time, favoring the largest `fractional / (quota + 1)`.
fn cap_to_pools(
    quotas: &mut BTreeMap<TaskId, usize>,
    fractional: &BTreeMap<TaskId, f64>,
    pools: &BTreeMap<TaskId, usize>,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let mut excess = 0;
    for (k, q) in quotas.iter_mut() {
        let cap = pools[k];
        if *q > cap {
            warnings.push(format!("task {k} quota {q} exceeds pool size {cap}; redistributing"));
            excess += *q - cap;
            *q = cap;
        }
    }
    while excess > 0 {
        let target = quotas
            .iter()
            .filter(|(k, q)| **q < pools[*k])
            .map(|(k, q)| (*k, fractional[k].max(1e-12) / (*q as f64 + 1.0)))
            .fold(None::<(TaskId, f64)>, |best, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        let Some((k, _)) = target else {
            return Err(invalid("batch budget exceeds the total prompt pool"));
        };
        *quotas.get_mut(&k).unwrap() += 1;
        excess -= 1;
    }
    Ok(())
}

/// Phases 2-3 from explicit task utilities.
pub fn schedule_from_utilities(
    ledger: &UtilityLedger,
    task_utilities: BTreeMap<TaskId, TaskUtility>,
    tasks: &[TaskSpec],
    budget: usize,
    tau: f64,
    step: u64,
    root_seed: u64,
    mode: ScheduleMode,
) -> Result<ScheduleDecision> {
    let step_seed = derive_seed(root_seed, &[step]);
    let combined: BTreeMap<TaskId, f64> = task_utilities.iter().map(|(k, u)| (*k, u.combined)).collect();
    let fractional = if mode.uniform_quotas {
        let even = budget as f64 / tasks.len() as f64;
        tasks.iter().map(|t| (t.task_id, even)).collect()
    } else {
        allocate_quotas(&combined, budget, tau)?
    };
    let RoundedQuotas { mut quotas, mut warnings } =
        round_quotas(&fractional, budget, stream_seed(step_seed, Stream::Rounding, &[]))?;
    let pools: BTreeMap<TaskId, usize> = tasks.iter().map(|t| (t.task_id, t.prompt_pool.len())).collect();
    cap_to_pools(&mut quotas, &fractional, &pools, &mut warnings)?;

    let mut selected = BTreeMap::new();
    let mut all_weights = BTreeMap::new();
    for task in tasks {
        let k = task.task_id;
        let tracked = ledger.prompt_utilities(k);
        let utilities: BTreeMap<PromptId, f64> = task
            .prompt_pool
            .iter()
            .map(|p| {
                let u = if mode.random_prompts {
                    0.0
                } else {
                    tracked.get(&p.prompt_id).copied().unwrap_or(0.0)
                };
                (p.prompt_id, u)
            })
            .collect();
        let weights = prompt_weights(&utilities);
        let pool: Vec<PromptId> = weights.keys().copied().collect();
        let w: Vec<f64> = weights.values().copied().collect();
        let n = quotas[&k];
        let seed = stream_seed(step_seed, Stream::PromptSampling, &[k.0 as u64]);
        selected.insert(k, sample_without_replacement(&pool, &w, n, seed)?);
        all_weights.insert(k, weights);
    }

    let decision = ScheduleDecision {
        step,
        fractional_quotas: fractional,
        integer_quotas: quotas,
        selected_prompts: selected,
        seed_used: step_seed,
        task_utilities,
        prompt_weights: all_weights,
        warnings,
    };
    decision.check_invariants(budget)?;
    Ok(decision)
}

/// Phases 2-3: task utilities from the ledger, softmax quotas, stochastic
/// rounding, prompt weights, weighted sampling without replacement.
pub fn build_schedule(
    ledger: &UtilityLedger,
    tasks: &[TaskSpec],
    budget: usize,
    tau: f64,
    step: u64,
    root_seed: u64,
    mode: ScheduleMode,
) -> Result<ScheduleDecision> {
    schedule_from_utilities(ledger, ledger.task_utilities(), tasks, budget, tau, step, root_seed, mode)
}
