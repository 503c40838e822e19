//! Seeded randomness with independent per-purpose substreams.
//!
//! Every random draw in the pipeline comes from a [`ChaCha8Rng`] keyed by a
//! root seed plus a short path of integers (purpose tag, epoch, item index).
//! Substreams never share state, so generation order does not affect results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags for substream paths.
pub mod stream {
    pub const SHUFFLE: u64 = 1;
    pub const PLACEMENT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SYNTHETIC: u64 = 4;
    pub const TRANSFORM_PICK: u64 = 5;
    pub const EVAL_SHUFFLE: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit key from a root seed and a path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn substream(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
