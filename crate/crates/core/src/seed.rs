//! Named substream derivation. Every random stream in the crate is derived
//! from a master seed and a label so that results do not depend on the
//! order in which unrelated components consume randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random stream used throughout the crate.
pub type Rng64 = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Stable 64-bit FNV-1a hash. Unlike `DefaultHasher` the output is fixed
/// across toolchains, which keeps seeded runs reproducible.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines a seed with another 64-bit word.
pub fn mix(seed: u64, word: u64) -> u64 {
    splitmix(seed ^ splitmix(word))
}

/// Seed for the substream `label` of `seed`.
pub fn derive(seed: u64, label: &str) -> u64 {
    mix(seed, fnv1a(label.as_bytes()))
}

pub fn rng_from(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(seed: u64, label: &str) -> Rng64 {
    rng_from(derive(seed, label))
}
