//! Format gating, text-similarity metrics and reward fusion.

use std::collections::HashMap;
use std::hash::Hash;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Task reward substituted for outputs that fail the format gate.
pub const WRONG_FORMAT_TASK_REWARD: f64 = -0.1;

static FORMAT_PATTERN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"<think>(.+?)</think>\s*<answer>(.+?)</answer>").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatCheckResult {
    pub compliant: bool,
    pub think_text: Option<String>,
    pub answer_text: Option<String>,
}

impl FormatCheckResult {
    pub fn non_compliant() -> Self {
        FormatCheckResult {
            compliant: false,
            think_text: None,
            answer_text: None,
        }
    }
}

/// Search `text` for a `<think>..</think> <answer>..</answer>` block whose
/// two captures both hold non-whitespace content.
pub fn check_format(text: &str) -> FormatCheckResult {
    let Some(caps) = FORMAT_PATTERN.captures(text) else {
        return FormatCheckResult::non_compliant();
    };
    let think = caps[1].to_string();
    let answer = caps[2].to_string();
    if think.trim().is_empty() || answer.trim().is_empty() {
        return FormatCheckResult::non_compliant();
    }
    FormatCheckResult {
        compliant: true,
        think_text: Some(think),
        answer_text: Some(answer),
    }
}

/// Lowercase, then split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU-4 with brevity penalty.
///
/// Smoothing: unigram precision is unsmoothed; for n = 2..4 an order with
/// zero clipped matches uses `1 / (total_n + 1)` (add-one on numerator and
/// denominator). Orders longer than the candidate therefore contribute 1.
pub fn bleu4<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(invalid("BLEU reference is empty"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total = candidate.len().saturating_sub(n - 1);
        let matched: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let precision = if n == 1 {
            if matched == 0 {
                return Ok(0.0);
            }
            matched as f64 / total as f64
        } else if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += precision.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok((bp * (log_sum / 4.0).exp()).clamp(0.0, 1.0))
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// METEOR parameters (NLTK defaults).
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// METEOR restricted to exact unigram matches.
///
/// Alignment is greedy: each candidate token, left to right, takes the
/// earliest unused identical reference token. The score is
/// `Fmean * (1 - gamma * (chunks / matches)^beta)` with
/// `Fmean = P R / (alpha P + (1 - alpha) R)`.
pub fn meteor_exact<T: Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(invalid("METEOR reference is empty"));
    }
    let mut used = vec![false; reference.len()];
    let mut alignment = Vec::new();
    for (i, c) in candidate.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *c) {
            used[j] = true;
            alignment.push((i, j));
        }
    }
    let m = alignment.len();
    if m == 0 {
        return Ok(0.0);
    }
    let mut chunks = 1;
    for w in alignment.windows(2) {
        let ((i0, j0), (i1, j1)) = (w[0], w[1]);
        if !(i1 == i0 + 1 && j1 == j0 + 1) {
            chunks += 1;
        }
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    Ok((fmean * (1.0 - penalty)).clamp(0.0, 1.0))
}

/// Mean of BLEU-4, ROUGE-L and exact METEOR.
pub fn text_similarity<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Result<f64> {
    let b = bleu4(candidate, reference)?;
    let r = rouge_l(candidate, reference);
    let m = meteor_exact(candidate, reference)?;
    Ok((b + r + m) / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub task: f64,
    pub format: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { task: 0.5, format: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedReward {
    pub task_metric: f64,
    pub format_flag: u8,
    pub fused: f64,
    pub w_task: f64,
    pub w_fmt: f64,
}

/// Combine a task metric with the format gate. Non-compliant outputs have
/// their task metric replaced by [`WRONG_FORMAT_TASK_REWARD`].
pub fn fuse_reward(task_metric: f64, format: &FormatCheckResult, weights: RewardWeights) -> FusedReward {
    fuse_flag(task_metric, format.compliant, weights)
}

pub fn fuse_flag(task_metric: f64, compliant: bool, weights: RewardWeights) -> FusedReward {
    let effective = if compliant { task_metric } else { WRONG_FORMAT_TASK_REWARD };
    let flag = u8::from(compliant);
    FusedReward {
        task_metric,
        format_flag: flag,
        fused: weights.task * effective + weights.format * f64::from(flag),
        w_task: weights.task,
        w_fmt: weights.format,
    }
}
