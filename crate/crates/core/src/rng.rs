//! Seeded random streams.
//!
//! Every generator in this crate draws from `ChaCha8Rng::seed_from_u64`.
//! Gaussians use `rand_distr::StandardNormal` (ziggurat), uniforms use
//! `rand`'s `[low, high)` float sampling. The combination is recorded in
//! datasets as [`GENERATOR_TAG`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GENERATOR_TAG: &str = "chacha8/seed_from_u64;normal=ziggurat(rand_distr 0.5);uniform=rand 0.9";

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a sub-task (`stream` distinguishes
/// e.g. matrix draws from right-hand-side draws under the same seed).
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
