//! Seed derivation for independent, order-free RNG streams.
//!
//! Every random decision in a run draws from a stream keyed by the global
//! seed plus a purpose tag and indices (node id, round, ...), so parallel and
//! sequential execution consume identical randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Values are part of the reproducibility contract.
pub mod purpose {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const MALICIOUS: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const POISON_DATA: u64 = 6;
    pub const POISON_MODEL: u64 = 7;
    pub const BOOTSTRAP: u64 = 8;
    pub const REPEAT: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `parts` into `seed`. Distinct part sequences give unrelated seeds.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}
