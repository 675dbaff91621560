//! Deterministic random streams.
//!
//! Every draw comes from a ChaCha generator seeded by the master seed and
//! placed on a stream keyed by `(purpose, index)`, so results do not depend on
//! the order in which replications are evaluated.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Stream purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Covariates = 1,
    Replication = 2,
}

/// Generator for stream `(purpose, index)` under `master`.
pub fn child_rng(master: u64, purpose: Stream, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    // 64-bit stream id: purpose in the top byte, index below.
    rng.set_stream(((purpose as u64) << 56) | (index & ((1u64 << 56) - 1)));
    rng
}
