//! Seeded random streams.
//!
//! Every component draws from its own ChaCha stream derived from a master
//! seed and a fixed stream id, so enabling an extra component never shifts
//! the draws of the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids for the pipeline components.
pub mod streams {
    pub const TRAJECTORIES: u64 = 1;
    pub const DEMONSTRATIONS: u64 = 2;
    pub const PREFERENCES: u64 = 3;
    pub const RATINGS: u64 = 4;
    pub const STOPS: u64 = 5;
    pub const INIT: u64 = 6;
    pub const TRAINING: u64 = 7;
}

/// Generator for `stream` under `seed`.
pub fn derive(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator for `stream` with an additional sub-index (e.g. a modality
/// index within the preference stream).
pub fn derive_sub(seed: u64, stream: u64, sub: u64) -> Rng {
    derive(seed, (stream << 32) | (sub & 0xffff_ffff))
}
