//! Deterministic random substreams.
//!
//! Every parallel unit of work (a posterior draw, a grid cell) gets its own
//! ChaCha stream derived from the run seed and a stream id, so results do
//! not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids reserved for the fixed generation stages.
pub mod stream {
    pub const COEFFICIENTS: u64 = 1 << 40;
    pub const WEIGHT_TABLES: u64 = (1 << 40) + 1;
    pub const MARGINS: u64 = (1 << 40) + 2;
    pub const SURVEY: u64 = (1 << 40) + 3;
    pub const COVERAGE: u64 = (1 << 40) + 4;
    pub const ENSEMBLE_SEED: u64 = (1 << 40) + 5;
    pub const WEIGHTS_SEED: u64 = (1 << 40) + 6;
    pub const PRECOMPUTE_SEED: u64 = (1 << 40) + 7;
}

pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for a downstream stage that itself fans out over numbered streams.
pub fn derive_seed(seed: u64, stage: u64) -> u64 {
    use rand::Rng;
    substream(seed, stage).random()
}
