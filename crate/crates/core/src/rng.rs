//! Seed derivation for reproducible parallel streams.
//!
//! Every unit of parallel work (a replicate, an imputation draw) gets its own
//! ChaCha8 generator seeded from `(root seed, index, stream tag)`, so results
//! do not depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent consumers of the same index apart.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const IMPUTATION: u64 = 2;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, index: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ index) ^ tag.rotate_left(32))
}

pub fn stream_rng(seed: u64, index: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index, tag))
}
