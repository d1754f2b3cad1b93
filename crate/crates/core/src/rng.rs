//! The single random stream used across the crate.
//!
//! Every sampled quantity (bootstrap draws, column permutations, walk steps,
//! policy coin flips) comes from a [`ChaCha8Rng`]. It is portable and
//! counter-based, so a `(seed, stream)` pair names a reproducible substream
//! without any shared state between workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type CpathRng = ChaCha8Rng;

/// Generator for a top-level seed.
pub fn seeded(seed: u64) -> CpathRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream `index` of `seed`.
///
/// Substreams with distinct indices never overlap, so per-iteration work can
/// run in any order or on any thread and still draw identical numbers.
pub fn substream(seed: u64, index: u64) -> CpathRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
