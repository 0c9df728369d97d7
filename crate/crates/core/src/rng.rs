//! Deterministic per-trajectory random number streams.
//!
//! Each trajectory gets its own counter-based stream derived from
//! `(master_seed, trajectory_index)`, so results do not depend on how work is
//! scheduled across threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn trajectory_rng(master_seed: u64, trajectory_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trajectory_index);
    rng
}
