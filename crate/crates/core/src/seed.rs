//! Stable sub-seed derivation.
//!
//! Every random stream in the crate is keyed from one root seed plus a small
//! tuple of identifiers (user id, epoch, trial, ...). The mixing function is
//! SplitMix64's finalizer, which is stable across platforms and releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed`, order-sensitively.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(seed), |acc, &p| splitmix(splitmix(acc) ^ p))
}

/// Derives a seed from a textual label, e.g. `"corpus"` or `"train"`.
pub fn derive_label(seed: u64, label: &str) -> u64 {
    let parts: Vec<u64> = label.bytes().map(u64::from).collect();
    derive(seed, &parts)
}

pub fn rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}
