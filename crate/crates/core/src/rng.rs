//! Seeded random streams.
//!
//! One run seed feeds every component. Each component draws from its own
//! ChaCha stream keyed by that seed, so adding draws in one component never
//! shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream offsets for the components of a training trial.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const GEN_INIT: u64 = 3;
    pub const DISC_INIT: u64 = 4;
    pub const PENALTY: u64 = 5;
    pub const EVAL_NOISE: u64 = 6;
    pub const DATASET: u64 = 7;
    pub const PAIRS: u64 = 8;
    pub const DIVERSITY: u64 = 9;
    pub const DATASET_ROTATION: u64 = 10;
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(seed: u64, offset: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(offset);
    rng
}
