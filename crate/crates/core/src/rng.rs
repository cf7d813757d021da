//! Seeded random streams.
//!
//! Data preparation, model sampling and buffer sampling each draw from an
//! independent ChaCha stream so that one consumer never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Model = 3,
    Buffer = 4,
    Eval = 5,
    Probe = 6,
}

/// Derive the rng for `stream` from a run seed.
pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}
