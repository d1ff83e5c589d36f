//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by the experiment seed plus a stream label, so results do not depend
//! on the order in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with a sequence of stream coordinates.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    stream
        .iter()
        .fold(splitmix64(base), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}

pub fn stream_rng(base: u64, stream: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// Stream labels, kept distinct so adding a stream never perturbs another.
pub mod streams {
    pub const SYNTHETIC: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const PROBE: u64 = 5;
}
