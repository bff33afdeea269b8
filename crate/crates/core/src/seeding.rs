//! Seed derivation. Every random stream in a run descends from one global
//! seed, a purpose tag, and an index, so per-sample work is independent of
//! scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep streams for different jobs disjoint under one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Scene = 1,
    Style = 2,
    Init = 3,
    Shuffle = 4,
    Pretrain = 5,
    Adapt = 6,
    Sampling = 7,
}

pub fn derive_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((stream as u64) << 56).rotate_left(3));
    rng.set_stream(index);
    rng
}

/// A fresh `u64` seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    use rand::Rng;
    derive_rng(seed, stream, index).random()
}
