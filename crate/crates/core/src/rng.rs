//! Seed derivation. Every random quantity comes from a ChaCha stream keyed by
//! a 64-bit seed plus a stream id, so independent parts of a computation never
//! share a generator and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

/// Stream ids used by instance generation and the solvers.
pub mod streams {
    pub const TRUTH: u64 = 0;
    pub const GRAPH: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const EIGEN_START: u64 = 3;
    pub const PRIOR: u64 = 4;
}

pub fn stream(seed: u64, id: u64) -> StreamRng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for item `index` (a trial, a prior draw) under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}
