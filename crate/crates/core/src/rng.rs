//! Seeded random substreams.
//!
//! All randomness comes from ChaCha20 keyed by the 64-bit run seed. Each
//! consumer gets its own stream id built from a worker (or batch) index and a
//! purpose tag, so the draws of one consumer never depend on how many values
//! another consumer pulled or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Features = 1,
    ModelMean = 2,
    GroundTruth = 3,
    LabelNoise = 4,
    OracleBatch = 5,
    TestData = 6,
}

pub fn substream(seed: u64, index: u64, purpose: Purpose) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((index << 8) | purpose as u64);
    rng
}
