//! Order-independent seed derivation for ensemble members.
//!
//! Member `m` gets the `m`-th output of a SplitMix64 counter stream keyed by
//! the master seed, so a member's randomness depends only on
//! `(master_seed, m)` and never on how many workers built the ensemble.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of ensemble member `index` (zero-based).
pub fn component_seed(master_seed: u64, index: u64) -> u64 {
    mix(master_seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// Random stream of ensemble member `index`.
pub fn component_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(component_seed(master_seed, index))
}
