//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from a master
//! seed mixed with a path of integers (fold, epoch, sample, ...), so a stream
//! depends only on its coordinates and never on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags used as the first path component.
pub mod tag {
    pub const INIT: u64 = 0x1001;
    pub const FOLDS: u64 = 0x1002;
    pub const SAMPLE: u64 = 0x1003;
    pub const ORDER: u64 = 0x1004;
    pub const PHANTOM: u64 = 0x2001;
    pub const NOISE: u64 = 0x2002;
    pub const GRADCHECK: u64 = 0x3001;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, path))
}
