//! Seeded random streams.
//!
//! Every random draw comes from ChaCha8 seeded with the run seed, with the
//! stream number selecting an independent sequence per purpose. Two runs
//! with the same seed therefore see the same data, batches and samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Test = 2,
    Split = 3,
    Batches = 4,
    Init = 5,
    Consensus = 6,
    Instances = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Independent generator for sub-task `index` of a stream, e.g. one
/// consensus restart.
pub fn substream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream as u64);
    rng
}
