//! Deterministic seeded RNG streams.
//!
//! Every stochastic routine in this crate takes a `ChaCha8Rng` so that a run
//! is a pure function of its seed. Concurrent work units (Monte Carlo
//! replicates, bootstrap refits) each get an independent stream derived from
//! `(seed, index)`; streams never overlap regardless of how much one unit
//! consumes.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG for stream `index` of the generator family keyed by `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Root RNG for `seed` (stream 0).
pub fn root(seed: u64) -> ChaCha8Rng {
    substream(seed, 0)
}
