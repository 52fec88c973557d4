//! Seed derivation. Every random stream in a run is keyed by the master
//! seed plus a tuple of small integers (worker, round, layer, ...), so the
//! order in which streams are consumed never changes their contents.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

// Stream tags.
pub(crate) const TAG_OBJECTIVE: u64 = 1;
pub(crate) const TAG_X0: u64 = 2;
pub(crate) const TAG_BATCH: u64 = 3;
pub(crate) const TAG_LINK_NOISE: u64 = 4;
pub(crate) const TAG_RANDK: u64 = 5;
