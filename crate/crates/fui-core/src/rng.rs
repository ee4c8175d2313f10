//! Deterministic counter-based RNG streams.
//!
//! Every randomized task derives its own generator from
//! `(master seed, domain, index)`, so results are independent of thread
//! count and execution order. ChaCha8 keeps the streams statistically
//! independent and portable across platforms.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Domain separators for the independent stream families.
pub mod domain {
    pub const BOOTSTRAP: u64 = 1;
    pub const MC_BAND: u64 = 2;
    pub const SIM_PERIODS: u64 = 3;
    pub const SIM_COVARIATES: u64 = 4;
    pub const SIM_SUBJECT_GP: u64 = 5;
    pub const SIM_NOISE_GP: u64 = 6;
    pub const SIM_NOISE_SCALE: u64 = 7;
    pub const STUDY: u64 = 8;
    pub const MC_BAND_COVARIATE: u64 = 9;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `(seed, domain, index)`.
pub fn derive_seed(seed: u64, domain: u64, index: u64) -> u64 {
    let mut h = mix(seed.wrapping_add(GOLDEN));
    h = mix(h ^ domain.wrapping_mul(GOLDEN));
    mix(h ^ index.wrapping_mul(GOLDEN))
}

/// A fresh generator for the task identified by `(seed, domain, index)`.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut h = derive_seed(seed, domain, index);
    for chunk in key.chunks_exact_mut(8) {
        h = mix(h.wrapping_add(GOLDEN));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
