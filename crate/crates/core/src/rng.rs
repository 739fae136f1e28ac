//! Seeded random streams.
//!
//! Every stochastic decision draws from a `ChaCha8Rng` (a counter-based
//! stream cipher generator) seeded with a 64-bit key. Keys for independent
//! streams are derived by folding a tuple of labels into the root seed with
//! the SplitMix64 finalizer, so a stream depends only on its labels and never
//! on the order in which streams are created. This keeps rollout generation
//! reproducible when it runs in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream labels used when deriving per-purpose seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Suite = 1,
    Init = 2,
    Rounding = 3,
    PromptSampling = 4,
    Rollout = 5,
    Evaluation = 6,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and an ordered list of labels.
pub fn derive_seed(root: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(root), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

/// Seed for a named stream, further keyed by `labels`.
pub fn stream_seed(root: u64, stream: Stream, labels: &[u64]) -> u64 {
    let mut all = Vec::with_capacity(labels.len() + 1);
    all.push(stream as u64);
    all.extend_from_slice(labels);
    derive_seed(root, &all)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
