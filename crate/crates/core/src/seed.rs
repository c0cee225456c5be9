//! Deterministic seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `index` of `master`; independent of evaluation order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix(mix(master) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Child seed for a labelled sub-stream (`"split"`, `"init"`, ...).
pub fn derive_labeled(master: u64, label: &str, index: u64) -> u64 {
    let tag = label
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x1000_0000_01B3));
    derive_seed(derive_seed(master, tag), index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
