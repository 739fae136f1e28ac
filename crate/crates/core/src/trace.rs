//! Run directory layout, CSV trace writers and trace validation.
//!
//! A run directory holds:
//!
//! | file             | columns |
//! |------------------|---------|
//! | `config.toml`    | effective run configuration |
//! | `allocation.csv` | `step,task_id,utility_pot_ema,utility_syn_ema,utility_combined,quota_fractional,quota_integer` |
//! | `utility.csv`    | `step,task_id,prompts,rollouts,potential,synergy,pot_norm,syn_norm` |
//! | `similarity.csv` | `step,task_i,task_j,cosine` (i < j) |
//! | `loss.csv`       | `step,task_id,surrogate,kl_term,beta_used,objective,mean_reward,reward_variance` |
//! | `prompts.csv`    | `step,task_id,prompt_id,weight,selected` (verbose runs only) |
//! | `checkpoint.json`| final checkpoint |
//!
//! `utility.csv` holds the instantaneous statistics recorded after each
//! update; `potential` is empty for tasks that received no prompts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::trainer::StepRecord;

pub const CONFIG_FILE: &str = "config.toml";
pub const ALLOCATION_FILE: &str = "allocation.csv";
pub const UTILITY_FILE: &str = "utility.csv";
pub const SIMILARITY_FILE: &str = "similarity.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const PROMPTS_FILE: &str = "prompts.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub step: u64,
    pub task_id: usize,
    pub utility_pot_ema: f64,
    pub utility_syn_ema: f64,
    pub utility_combined: f64,
    pub quota_fractional: f64,
    pub quota_integer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub step: u64,
    pub task_id: usize,
    pub prompts: usize,
    pub rollouts: usize,
    pub potential: Option<f64>,
    pub synergy: f64,
    pub pot_norm: f64,
    pub syn_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub step: u64,
    pub task_i: usize,
    pub task_j: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub task_id: usize,
    pub surrogate: f64,
    pub kl_term: f64,
    pub beta_used: f64,
    pub objective: f64,
    pub mean_reward: f64,
    pub reward_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRow {
    pub step: u64,
    pub task_id: usize,
    pub prompt_id: usize,
    pub weight: f64,
    pub selected: bool,
}

type CsvOut = csv::Writer<BufWriter<File>>;

fn create_csv(dir: &Path, name: &str) -> Result<CsvOut> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(dir.join(name))?)))
}

/// Appends one group of rows per step to the trace files of a run directory.
pub struct TraceWriter {
    dir: PathBuf,
    allocation: CsvOut,
    utility: CsvOut,
    similarity: CsvOut,
    loss: CsvOut,
    prompts: Option<CsvOut>,
}

impl TraceWriter {
    /// Create `dir` and write the config snapshot.
    pub fn create(dir: &Path, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), config.to_toml_string()?)?;
        Ok(TraceWriter {
            dir: dir.to_path_buf(),
            allocation: create_csv(dir, ALLOCATION_FILE)?,
            utility: create_csv(dir, UTILITY_FILE)?,
            similarity: create_csv(dir, SIMILARITY_FILE)?,
            loss: create_csv(dir, LOSS_FILE)?,
            prompts: if config.trace.verbose_prompts {
                Some(create_csv(dir, PROMPTS_FILE)?)
            } else {
                None
            },
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn record(&mut self, record: &StepRecord) -> Result<()> {
        let step = record.step;
        for t in &record.tasks {
            self.allocation.serialize(AllocationRow {
                step,
                task_id: t.task_id.0,
                utility_pot_ema: t.utility.ema_pot,
                utility_syn_ema: t.utility.ema_syn,
                utility_combined: t.utility.combined,
                quota_fractional: t.fractional_quota,
                quota_integer: t.integer_quota,
            })?;
            self.utility.serialize(UtilityRow {
                step,
                task_id: t.task_id.0,
                prompts: t.integer_quota,
                rollouts: t.rollouts,
                potential: t.potential,
                synergy: t.synergy,
                pot_norm: t.utility.pot_norm,
                syn_norm: t.utility.syn_norm,
            })?;
            if let (Some(loss), Some(mean_reward), Some(reward_variance)) = (t.loss, t.mean_reward, t.reward_variance) {
                self.loss.serialize(LossRow {
                    step,
                    task_id: t.task_id.0,
                    surrogate: loss.surrogate,
                    kl_term: loss.kl_term,
                    beta_used: loss.beta_used,
                    objective: loss.objective,
                    mean_reward,
                    reward_variance,
                })?;
            }
        }
        for &(i, j, cosine) in &record.similarity {
            self.similarity.serialize(SimilarityRow {
                step,
                task_i: i.0,
                task_j: j.0,
                cosine,
            })?;
        }
        if let Some(w) = self.prompts.as_mut() {
            for p in &record.prompts {
                w.serialize(PromptRow {
                    step,
                    task_id: p.task_id.0,
                    prompt_id: p.prompt_id.0,
                    weight: p.weight,
                    selected: p.selected,
                })?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.allocation.flush()?;
        self.utility.flush()?;
        self.similarity.flush()?;
        self.loss.flush()?;
        if let Some(w) = self.prompts.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReplayReport {
    pub steps: u64,
    pub tasks: usize,
    pub rows: usize,
    pub violations: Vec<String>,
}

impl ReplayReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn group_by_step<T, F: Fn(&T) -> u64>(rows: &[T], step_of: F) -> BTreeMap<u64, Vec<&T>> {
    let mut out: BTreeMap<u64, Vec<&T>> = BTreeMap::new();
    for r in rows {
        out.entry(step_of(r)).or_default().push(r);
    }
    out
}

/// Check every trace invariant of a run directory. I/O and parse failures
/// are errors; invariant failures are collected in the report.
pub fn validate_run_dir(dir: &Path) -> Result<ReplayReport> {
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let (b, g, k) = (config.budget, config.group_size, config.suite.tasks.len());
    let mut report = ReplayReport {
        tasks: k,
        ..ReplayReport::default()
    };
    let v = &mut report.violations;

    if !dir.join(CHECKPOINT_FILE).is_file() {
        v.push(format!("missing {CHECKPOINT_FILE}"));
    }

    let allocation: Vec<AllocationRow> = read_rows(&dir.join(ALLOCATION_FILE))?;
    let utility: Vec<UtilityRow> = read_rows(&dir.join(UTILITY_FILE))?;
    let similarity: Vec<SimilarityRow> = read_rows(&dir.join(SIMILARITY_FILE))?;
    let loss: Vec<LossRow> = read_rows(&dir.join(LOSS_FILE))?;
    report.rows = allocation.len() + utility.len() + similarity.len() + loss.len();

    for (name, steps) in [
        (ALLOCATION_FILE, allocation.iter().map(|r| r.step).collect::<Vec<_>>()),
        (UTILITY_FILE, utility.iter().map(|r| r.step).collect()),
        (SIMILARITY_FILE, similarity.iter().map(|r| r.step).collect()),
        (LOSS_FILE, loss.iter().map(|r| r.step).collect()),
    ] {
        if let Some(w) = steps.windows(2).find(|w| w[1] < w[0]) {
            v.push(format!("{name}: step {} follows step {}", w[1], w[0]));
        }
    }

    let alloc = group_by_step(&allocation, |r| r.step);
    let expected_steps: Vec<u64> = (1..=alloc.len() as u64).collect();
    if alloc.keys().copied().collect::<Vec<_>>() != expected_steps {
        v.push(format!("{ALLOCATION_FILE}: steps are not 1..={}", alloc.len()));
    }
    report.steps = alloc.len() as u64;

    let mut quotas: BTreeMap<(u64, usize), usize> = BTreeMap::new();
    for (step, rows) in &alloc {
        let ids: Vec<usize> = rows.iter().map(|r| r.task_id).collect();
        if ids != (0..k).collect::<Vec<_>>() {
            v.push(format!("{ALLOCATION_FILE}: step {step} has tasks {ids:?}"));
        }
        let total: usize = rows.iter().map(|r| r.quota_integer).sum();
        if total != b {
            v.push(format!("{ALLOCATION_FILE}: step {step} quotas sum to {total}, budget {b}"));
        }
        let frac: f64 = rows.iter().map(|r| r.quota_fractional).sum();
        if !close(frac, b as f64, 1e-9) {
            v.push(format!("{ALLOCATION_FILE}: step {step} fractional quotas sum to {frac}"));
        }
        for r in rows {
            if !(r.quota_fractional >= 0.0) {
                v.push(format!("{ALLOCATION_FILE}: step {step} task {} negative quota", r.task_id));
            }
            quotas.insert((*step, r.task_id), r.quota_integer);
        }
    }

    for (step, rows) in &group_by_step(&utility, |r| r.step) {
        if rows.len() != k {
            v.push(format!("{UTILITY_FILE}: step {step} has {} rows", rows.len()));
        }
        let total: usize = rows.iter().map(|r| r.rollouts).sum();
        if total != b * g {
            v.push(format!("{UTILITY_FILE}: step {step} has {total} rollouts, expected {}", b * g));
        }
        for r in rows {
            let q = quotas.get(&(*step, r.task_id)).copied();
            if q != Some(r.prompts) {
                v.push(format!("{UTILITY_FILE}: step {step} task {} prompts {} vs quota {q:?}", r.task_id, r.prompts));
            }
            if r.rollouts != r.prompts * g {
                v.push(format!("{UTILITY_FILE}: step {step} task {} rollouts {}", r.task_id, r.rollouts));
            }
            if r.potential.is_some() != (r.prompts > 0) {
                v.push(format!("{UTILITY_FILE}: step {step} task {} potential presence", r.task_id));
            }
            if !(-1.0..=1.0).contains(&r.synergy) {
                v.push(format!("{UTILITY_FILE}: step {step} task {} synergy {}", r.task_id, r.synergy));
            }
        }
    }

    let pairs = k * k.saturating_sub(1) / 2;
    let sim = group_by_step(&similarity, |r| r.step);
    for step in alloc.keys() {
        let n = sim.get(step).map_or(0, Vec::len);
        if n != pairs {
            v.push(format!("{SIMILARITY_FILE}: step {step} has {n} pairs, expected {pairs}"));
        }
    }
    for r in &similarity {
        if r.task_i >= r.task_j || r.task_j >= k {
            v.push(format!("{SIMILARITY_FILE}: step {} pair ({}, {})", r.step, r.task_i, r.task_j));
        }
        if !(-1.0..=1.0).contains(&r.cosine) {
            v.push(format!("{SIMILARITY_FILE}: step {} cosine {}", r.step, r.cosine));
        }
    }

    let losses = group_by_step(&loss, |r| r.step);
    for step in alloc.keys() {
        let have: Vec<usize> = losses.get(step).map_or(vec![], |rows| rows.iter().map(|r| r.task_id).collect());
        let want: Vec<usize> = (0..k).filter(|t| quotas.get(&(*step, *t)).copied().unwrap_or(0) > 0).collect();
        if have != want {
            v.push(format!("{LOSS_FILE}: step {step} has tasks {have:?}, quotas give {want:?}"));
        }
    }
    for r in &loss {
        if !close(r.objective, r.surrogate - r.beta_used * r.kl_term, 1e-9) {
            v.push(format!("{LOSS_FILE}: step {} task {} objective mismatch", r.step, r.task_id));
        }
        if r.beta_used < 0.0 || r.kl_term < -1e-12 || r.reward_variance < 0.0 {
            v.push(format!("{LOSS_FILE}: step {} task {} negative beta, KL or variance", r.step, r.task_id));
        }
        if !(-0.05 - 1e-12..=1.0 + 1e-12).contains(&r.mean_reward) {
            v.push(format!("{LOSS_FILE}: step {} task {} mean reward {}", r.step, r.task_id, r.mean_reward));
        }
    }

    let prompts_path = dir.join(PROMPTS_FILE);
    if prompts_path.is_file() {
        let prompts: Vec<PromptRow> = read_rows(&prompts_path)?;
        report.rows += prompts.len();
        let mut by_task: BTreeMap<(u64, usize), (usize, f64)> = BTreeMap::new();
        for r in &prompts {
            let e = by_task.entry((r.step, r.task_id)).or_default();
            e.0 += r.selected as usize;
            e.1 += r.weight;
            if !(r.weight > 0.0 && r.weight <= 1.0) {
                v.push(format!("{PROMPTS_FILE}: step {} weight {}", r.step, r.weight));
            }
        }
        for ((step, task), quota) in &quotas {
            match by_task.get(&(*step, *task)) {
                Some((selected, weight)) => {
                    if selected != quota {
                        v.push(format!("{PROMPTS_FILE}: step {step} task {task} selected {selected}, quota {quota}"));
                    }
                    if !close(*weight, 1.0, 1e-9) {
                        v.push(format!("{PROMPTS_FILE}: step {step} task {task} weights sum to {weight}"));
                    }
                }
                None => v.push(format!("{PROMPTS_FILE}: step {step} task {task} missing")),
            }
        }
    }
    Ok(report)
}
