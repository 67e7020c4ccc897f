//! Seed derivation.
//!
//! Every random draw in the lab comes from a [`ChaCha8Rng`] whose seed is
//! derived from the global seed, a stage label, and an item index:
//!
//! ```text
//! derive_seed(seed, stage, index) = splitmix64(splitmix64(seed ^ fnv1a64(stage)) ^ index)
//! ```
//!
//! The derivation is stable across platforms and releases, so any single
//! item of any stage can be regenerated in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stage: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a64(stage.as_bytes())) ^ index)
}

pub fn rng_for(seed: u64, stage: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stage, index))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
