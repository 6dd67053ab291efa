//! Named deterministic RNG streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream keyed by
//! (seed, role), so changing how one component consumes randomness cannot
//! shift the draws seen by another. This is what makes trajectory-identity
//! comparisons (e.g. targeted training with α = 0 versus standard training)
//! well defined, and keeps dataset seeds isolated from model-init seeds.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamId {
    /// Minibatch shuffling.
    Data = 0,
    /// Parameter initialization.
    Init = 1,
    /// Gaussian input noise (posterior-discrepancy term).
    Noise = 2,
    /// Adversary randomness: probe directions and δ initialization.
    Adversary = 3,
    /// Error-tally target sampling.
    Tally = 4,
    /// Synthetic dataset generation.
    DatasetGen = 5,
    /// Evaluation-time corruption noise.
    EvalNoise = 6,
}

pub fn stream(seed: u64, id: StreamId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}
