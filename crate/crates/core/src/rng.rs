//! Deterministic, independently seeded random streams.
//!
//! Every consumer of randomness in a training run gets its own stream keyed by
//! `(run seed, iteration, purpose)`. Skipping one consumer (for example the
//! unlabeled loss in a labeled-only run) never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Labeled-batch transformation: basic augmentation, Aug+SoftLabel, MixUp.
    LabeledAug = 1,
    /// Views and directions drawn inside the unlabeled loss.
    UnlabeledLoss = 2,
    /// Minibatch shuffling of the labeled set.
    LabeledOrder = 3,
    /// Minibatch shuffling of the unlabeled set.
    UnlabeledOrder = 4,
    /// Model initialization.
    Init = 5,
    /// Dataset synthesis.
    Data = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a seed from a base seed and a list of keys.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, iteration: u64, purpose: Stream) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, &[purpose as u64, iteration]))
}
