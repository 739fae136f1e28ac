//! Position-factorized log-linear sequence policy.
//!
//! For a prompt with feature vector `phi`, the token at position `p` is drawn
//! from `softmax(W[p] . phi + b)` where `W` has shape `(L, V, F)` and `b` has
//! shape `(V,)`. Positions are conditionally independent given the prompt,
//! which makes KL, enumeration and gradients exact.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;
use crate::{PromptId, TaskId, Token};

pub const WEIGHTS: &str = "weights";
pub const BIAS: &str = "bias";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub tensor: Tensor,
}

/// Named, ordered parameter tensors of the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    layers: Vec<Layer>,
    vocab_size: usize,
    seq_len: usize,
    feature_dim: usize,
}

/// Gradients share the exact layer structure of the parameters.
pub type Gradient = PolicyParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub prompt_id: PromptId,
    pub task_id: TaskId,
    pub features: Vec<f64>,
}

/// `G` sampled sequences for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: PromptId,
    pub sequences: Vec<Vec<Token>>,
    /// Log-probability of each sequence under the policy that sampled it.
    pub logprobs_behavior: Vec<f64>,
    /// Empty until the group is scored.
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn is_scored(&self) -> bool {
        !self.sequences.is_empty() && self.rewards.len() == self.sequences.len()
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, seq_len: usize, feature_dim: usize) -> Result<Self> {
        if vocab_size == 0 || seq_len == 0 || feature_dim == 0 {
            return Err(invalid(format!(
                "policy dimensions must be positive (V={vocab_size}, L={seq_len}, F={feature_dim})"
            )));
        }
        Ok(PolicyParams {
            layers: vec![
                Layer {
                    name: WEIGHTS.to_string(),
                    tensor: Tensor::zeros(&[seq_len, vocab_size, feature_dim]),
                },
                Layer {
                    name: BIAS.to_string(),
                    tensor: Tensor::zeros(&[vocab_size]),
                },
            ],
            vocab_size,
            seq_len,
            feature_dim,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for layer in &mut out.layers {
            layer.tensor.data_mut().fill(0.0);
        }
        out
    }

    /// Check structural invariants: unique names, a rank >= 2 layer,
    /// finite entries, and the weight/bias shapes of the policy law.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(invalid("policy needs at least two layers"));
        }
        if !self.layers.iter().any(|l| l.tensor.rank() >= 2) {
            return Err(invalid("policy needs a layer of rank >= 2"));
        }
        for (i, a) in self.layers.iter().enumerate() {
            if self.layers[..i].iter().any(|b| b.name == a.name) {
                return Err(invalid(format!("duplicate layer name {:?}", a.name)));
            }
            if !a.tensor.is_finite() {
                return Err(Error::Numeric(format!("layer {:?} has non-finite entries", a.name)));
            }
        }
        let (l, v, f) = (self.seq_len, self.vocab_size, self.feature_dim);
        if self.weights().shape() != [l, v, f] {
            return Err(invalid(format!(
                "weights shape {:?} != [{l}, {v}, {f}]",
                self.weights().shape()
            )));
        }
        if self.bias().shape() != [v] {
            return Err(invalid(format!("bias shape {:?} != [{v}]", self.bias().shape())));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn weights(&self) -> &Tensor {
        &self.layers[0].tensor
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.layers[0].tensor
    }

    pub fn bias(&self) -> &Tensor {
        &self.layers[1].tensor
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.layers[1].tensor
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.tensor.len()).sum()
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.vocab_size == other.vocab_size
            && self.seq_len == other.seq_len
            && self.feature_dim == other.feature_dim
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape())
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.tensor.data().iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.tensor.data_mut().iter_mut())
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &PolicyParams) {
        debug_assert!(self.same_shape(other));
        for (x, y) in self.values_mut().zip(other.values()) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for x in self.values_mut() {
            *x *= a;
        }
    }

    pub fn dot(&self, other: &PolicyParams) -> f64 {
        self.values().zip(other.values()).map(|(x, y)| x * y).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|x| x.is_finite())
    }

    /// Flat view of every coordinate in layer order.
    pub fn flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        *self.values().nth(index).expect("index in range")
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        *self.values_mut().nth(index).expect("index in range") = value;
    }

    fn check_prompt(&self, prompt: &PromptContext) -> Result<()> {
        if prompt.features.len() != self.feature_dim {
            return Err(invalid(format!(
                "prompt {} has {} features, policy expects {}",
                prompt.prompt_id,
                prompt.features.len(),
                self.feature_dim
            )));
        }
        if prompt.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("prompt {} has non-finite features", prompt.prompt_id)));
        }
        Ok(())
    }

    /// Row-major `(L, V)` logits for a prompt.
    pub fn logits(&self, prompt: &PromptContext) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        let (l, v, f) = (self.seq_len, self.vocab_size, self.feature_dim);
        let w = self.weights().data();
        let b = self.bias().data();
        let phi = &prompt.features;
        let mut z = vec![0.0; l * v];
        for (row, out) in w.chunks_exact(f).zip(z.iter_mut()) {
            *out = row.iter().zip(phi).map(|(a, x)| a * x).sum();
        }
        for pos in z.chunks_exact_mut(v) {
            for (o, bb) in pos.iter_mut().zip(b) {
                *o += bb;
            }
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logits for prompt {}", prompt.prompt_id)));
        }
        Ok(z)
    }

    pub fn log_prob_table(&self, prompt: &PromptContext) -> Result<LogProbTable> {
        let mut z = self.logits(prompt)?;
        for row in z.chunks_exact_mut(self.vocab_size) {
            log_softmax_in_place(row);
        }
        Ok(LogProbTable {
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            logp: z,
        })
    }

    /// Add `scale * dL/dW, dL/db` given `dL/dz` for all positions.
    pub fn accumulate_logit_grad(&mut self, features: &[f64], logit_grad: &[f64], scale: f64) {
        let (v, f) = (self.vocab_size, self.feature_dim);
        debug_assert_eq!(logit_grad.len(), self.seq_len * v);
        {
            let w = self.weights_mut().data_mut();
            for (row, &gz) in w.chunks_exact_mut(f).zip(logit_grad) {
                if gz == 0.0 {
                    continue;
                }
                let c = scale * gz;
                for (x, phi) in row.iter_mut().zip(features) {
                    *x += c * phi;
                }
            }
        }
        let b = self.bias_mut().data_mut();
        for pos in logit_grad.chunks_exact(v) {
            for (x, gz) in b.iter_mut().zip(pos) {
                *x += scale * gz;
            }
        }
    }
}

fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

/// Per-position log-softmax probabilities, row-major `(L, V)`.
#[derive(Debug, Clone)]
pub struct LogProbTable {
    vocab_size: usize,
    seq_len: usize,
    logp: Vec<f64>,
}

impl LogProbTable {
    pub fn row(&self, pos: usize) -> &[f64] {
        &self.logp[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }

    pub fn probs(&self, pos: usize) -> impl Iterator<Item = f64> + '_ {
        self.row(pos).iter().map(|x| x.exp())
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn check_sequence(&self, sequence: &[Token]) -> Result<()> {
        if sequence.len() != self.seq_len {
            return Err(invalid(format!(
                "sequence length {} != {}",
                sequence.len(),
                self.seq_len
            )));
        }
        if let Some(t) = sequence.iter().find(|&&t| t >= self.vocab_size) {
            return Err(invalid(format!("token {t} out of vocabulary {}", self.vocab_size)));
        }
        Ok(())
    }

    pub fn sequence_log_prob(&self, sequence: &[Token]) -> f64 {
        sequence
            .iter()
            .enumerate()
            .map(|(p, &t)| self.row(p)[t])
            .sum()
    }

    /// `dz = onehot(token) - softmax(z)` for every position, scaled by `c`, added to `out`.
    pub fn add_score_grad(&self, sequence: &[Token], c: f64, out: &mut [f64]) {
        let v = self.vocab_size;
        for (p, &t) in sequence.iter().enumerate() {
            let dz = &mut out[p * v..(p + 1) * v];
            for (d, lp) in dz.iter_mut().zip(self.row(p)) {
                *d -= c * lp.exp();
            }
            dz[t] += c;
        }
    }

    pub fn argmax_sequence(&self) -> Vec<Token> {
        (0..self.seq_len)
            .map(|p| {
                let row = self.row(p);
                let mut best = 0;
                for (t, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = t;
                    }
                }
                best
            })
            .collect()
    }
}

/// Mean over positions of the exact categorical KL between two tables,
/// together with `d KL / d z` of the first table's logits.
pub fn kl_with_logit_grad(policy: &LogProbTable, reference: &LogProbTable) -> (f64, Vec<f64>) {
    let (l, v) = (policy.seq_len, policy.vocab_size);
    let mut grad = vec![0.0; l * v];
    let mut total = 0.0;
    for p in 0..l {
        let lp = policy.row(p);
        let lr = reference.row(p);
        let kl_p: f64 = lp
            .iter()
            .zip(lr)
            .map(|(a, b)| {
                let pa = a.exp();
                if pa == 0.0 {
                    0.0
                } else {
                    pa * (a - b)
                }
            })
            .sum();
        total += kl_p;
        for (t, g) in grad[p * v..(p + 1) * v].iter_mut().enumerate() {
            let pa = lp[t].exp();
            if pa != 0.0 {
                *g = pa * (lp[t] - lr[t] - kl_p) / l as f64;
            }
        }
    }
    ((total / l as f64).max(0.0), grad)
}

/// Draw `g` independent sequences from the policy for one prompt.
pub fn sample_rollouts(
    params: &PolicyParams,
    prompt: &PromptContext,
    g: usize,
    seed: u64,
) -> Result<RolloutGroup> {
    if g == 0 {
        return Err(invalid("group size G must be >= 1"));
    }
    let table = params.log_prob_table(prompt)?;
    let (l, v) = (params.seq_len, params.vocab_size);
    let cdfs: Vec<Vec<f64>> = (0..l)
        .map(|p| {
            let mut acc = 0.0;
            table
                .probs(p)
                .map(|x| {
                    acc += x;
                    acc
                })
                .collect()
        })
        .collect();
    let mut rng = rng_from_seed(seed);
    let mut sequences = Vec::with_capacity(g);
    let mut logprobs = Vec::with_capacity(g);
    for _ in 0..g {
        let seq: Vec<Token> = cdfs
            .iter()
            .map(|cdf| {
                // first index whose cumulative mass exceeds u; zero-mass tokens never qualify
                let u = rng.random::<f64>() * cdf[v - 1];
                cdf.partition_point(|&c| c <= u).min(v - 1)
            })
            .collect();
        logprobs.push(table.sequence_log_prob(&seq).min(0.0));
        sequences.push(seq);
    }
    Ok(RolloutGroup {
        prompt_id: prompt.prompt_id,
        sequences,
        logprobs_behavior: logprobs,
        rewards: Vec::new(),
    })
}

pub fn sequence_log_prob(params: &PolicyParams, prompt: &PromptContext, sequence: &[Token]) -> Result<f64> {
    let table = params.log_prob_table(prompt)?;
    table.check_sequence(sequence)?;
    Ok(table.sequence_log_prob(sequence).min(0.0))
}

/// Mean per-position KL(params || reference) for one prompt.
pub fn token_kl(params: &PolicyParams, reference: &PolicyParams, prompt: &PromptContext) -> Result<f64> {
    if !params.same_shape(reference) {
        return Err(invalid("policy and reference shapes differ"));
    }
    let a = params.log_prob_table(prompt)?;
    let b = reference.log_prob_table(prompt)?;
    Ok(kl_with_logit_grad(&a, &b).0)
}

/// Exact gradient of `sequence_log_prob` with respect to every layer.
pub fn grad_log_prob(params: &PolicyParams, prompt: &PromptContext, sequence: &[Token]) -> Result<Gradient> {
    let table = params.log_prob_table(prompt)?;
    table.check_sequence(sequence)?;
    let mut dz = vec![0.0; params.seq_len * params.vocab_size];
    table.add_score_grad(sequence, 1.0, &mut dz);
    let mut grad = params.zeros_like();
    grad.accumulate_logit_grad(&prompt.features, &dz, 1.0);
    Ok(grad)
}

/// Most likely sequence (per-position argmax).
pub fn greedy_sequence(params: &PolicyParams, prompt: &PromptContext) -> Result<Vec<Token>> {
    Ok(params.log_prob_table(prompt)?.argmax_sequence())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(features: Vec<f64>) -> PromptContext {
        PromptContext {
            prompt_id: PromptId(0),
            task_id: TaskId(0),
            features,
        }
    }

    fn random_params(v: usize, l: usize, f: usize, seed: u64) -> PolicyParams {
        let mut rng = rng_from_seed(seed);
        let mut p = PolicyParams::zeros(v, l, f).unwrap();
        for layer in p.layers_mut() {
            for x in layer.tensor.data_mut() {
                *x = rng.random::<f64>() * 2.0 - 1.0;
            }
        }
        p
    }

    /// Put logit +1e6 on `hot[p]` at each position and -1e6 elsewhere.
    fn one_hot_params(v: usize, hot: &[Token]) -> PolicyParams {
        let l = hot.len();
        let mut p = PolicyParams::zeros(v, l, 1).unwrap();
        let w = p.weights_mut().data_mut();
        for (pos, &t) in hot.iter().enumerate() {
            for tok in 0..v {
                w[pos * v + tok] = if tok == t { 1e6 } else { -1e6 };
            }
        }
        p
    }

    #[test]
    fn degenerate_softmax_samples_argmax() {
        let hot = [2, 0, 1];
        let params = one_hot_params(3, &hot);
        let q = prompt(vec![1.0]);
        let group = sample_rollouts(&params, &q, 16, 5).unwrap();
        assert!(group.sequences.iter().all(|s| s == &hot));
        assert!(sequence_log_prob(&params, &q, &hot).unwrap().abs() < 1e-6);
        let g = grad_log_prob(&params, &q, &hot).unwrap();
        assert!(g.flat().iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn sampling_is_seeded() {
        let params = random_params(4, 3, 2, 1);
        let q = prompt(vec![0.3, -0.7]);
        let a = sample_rollouts(&params, &q, 32, 99).unwrap();
        let b = sample_rollouts(&params, &q, 32, 99).unwrap();
        assert_eq!(a, b);
        for (s, lp) in a.sequences.iter().zip(&a.logprobs_behavior) {
            assert_eq!(*lp, sequence_log_prob(&params, &q, s).unwrap());
        }
    }

    #[test]
    fn zero_group_is_rejected() {
        let params = PolicyParams::zeros(2, 1, 1).unwrap();
        assert!(matches!(
            sample_rollouts(&params, &prompt(vec![1.0]), 0, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn non_finite_logits_are_reported() {
        let params = PolicyParams::zeros(2, 1, 1).unwrap();
        let q = prompt(vec![f64::NAN]);
        assert!(matches!(sample_rollouts(&params, &q, 1, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let params = PolicyParams::zeros(4, 1, 1).unwrap();
        let group = sample_rollouts(&params, &prompt(vec![1.0]), 100_000, 3).unwrap();
        let mut counts = [0usize; 4];
        for s in &group.sequences {
            counts[s[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn uniform_log_prob() {
        let params = PolicyParams::zeros(4, 3, 2).unwrap();
        let lp = sequence_log_prob(&params, &prompt(vec![0.5, 0.5]), &[0, 3, 1]).unwrap();
        assert!((lp - 3.0 * 0.25f64.ln()).abs() < 1e-12);
        assert!((lp + 4.158883).abs() < 1e-6);
    }

    #[test]
    fn log_prob_matches_brute_force_softmax() {
        let params = random_params(3, 2, 2, 11);
        let q = prompt(vec![0.4, -1.2]);
        let w = params.weights().data();
        let b = params.bias().data();
        let seq = [2, 0];
        let mut expected = 1.0;
        for (p, &t) in seq.iter().enumerate() {
            let z: Vec<f64> = (0..3)
                .map(|v| w[(p * 3 + v) * 2] * 0.4 + w[(p * 3 + v) * 2 + 1] * -1.2 + b[v])
                .collect();
            let denom: f64 = z.iter().map(|x| x.exp()).sum();
            expected *= z[t].exp() / denom;
        }
        let got = sequence_log_prob(&params, &q, &seq).unwrap();
        assert!((got - expected.ln()).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let params = PolicyParams::zeros(3, 2, 1).unwrap();
        let q = prompt(vec![1.0]);
        assert!(sequence_log_prob(&params, &q, &[0]).is_err());
        assert!(sequence_log_prob(&params, &q, &[0, 3]).is_err());
        assert!(grad_log_prob(&params, &q, &[0, 1, 2]).is_err());
    }

    #[test]
    fn kl_identity_and_closed_form() {
        let params = random_params(3, 2, 2, 4);
        let q = prompt(vec![1.0, 0.5]);
        assert!(token_kl(&params, &params, &q).unwrap().abs() < 1e-12);

        let uniform = PolicyParams::zeros(2, 1, 1).unwrap();
        let mut reference = PolicyParams::zeros(2, 1, 1).unwrap();
        reference.bias_mut().data_mut().copy_from_slice(&[0.9f64.ln(), 0.1f64.ln()]);
        let kl = token_kl(&uniform, &reference, &prompt(vec![0.0])).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.510826).abs() < 1e-6);
    }

    #[test]
    fn kl_shape_mismatch() {
        let a = PolicyParams::zeros(2, 1, 1).unwrap();
        let b = PolicyParams::zeros(3, 1, 1).unwrap();
        assert!(token_kl(&a, &b, &prompt(vec![1.0])).is_err());
    }

    #[test]
    fn kl_is_non_negative() {
        for seed in 0..1000 {
            let a = random_params(3, 2, 2, seed);
            let b = random_params(3, 2, 2, seed + 10_000);
            let q = prompt(vec![0.7, -0.2]);
            assert!(token_kl(&a, &b, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn softmax_gradient_identity_two_by_two() {
        // V=2, L=1, F=2: dW[v, f] = (onehot(t) - softmax(z))_v * phi_f.
        let mut params = PolicyParams::zeros(2, 1, 2).unwrap();
        params.weights_mut().data_mut().copy_from_slice(&[0.5, -0.25, 1.0, 0.75]);
        params.bias_mut().data_mut().copy_from_slice(&[0.1, -0.1]);
        let phi = [2.0, -1.0];
        let z0: f64 = 0.5 * 2.0 + -0.25 * -1.0 + 0.1;
        let z1: f64 = 1.0 * 2.0 + 0.75 * -1.0 - 0.1;
        let p0 = z0.exp() / (z0.exp() + z1.exp());
        let p1 = 1.0 - p0;
        let g = grad_log_prob(&params, &prompt(phi.to_vec()), &[1]).unwrap();
        let expected_w = [-p0 * 2.0, -p0 * -1.0, (1.0 - p1) * 2.0, (1.0 - p1) * -1.0];
        for (a, b) in g.weights().data().iter().zip(expected_w) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((g.bias().data()[0] + p0).abs() < 1e-12);
        assert!((g.bias().data()[1] - (1.0 - p1)).abs() < 1e-12);
    }

    #[test]
    fn validate_catches_bad_structure() {
        let mut p = PolicyParams::zeros(2, 2, 2).unwrap();
        assert!(p.validate().is_ok());
        p.layers_mut()[1].name = WEIGHTS.into();
        assert!(p.validate().is_err());
        let mut p = PolicyParams::zeros(2, 2, 2).unwrap();
        p.bias_mut().data_mut()[0] = f64::INFINITY;
        assert!(p.validate().is_err());
        assert!(PolicyParams::zeros(0, 1, 1).is_err());
    }
}
