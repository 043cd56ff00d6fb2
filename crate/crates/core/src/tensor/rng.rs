//! Seedable random number generation.
//!
//! Every stochastic step in the crate (initialization, shuffling, noise)
//! draws from a ChaCha8 generator created here, so runs are bit-reproducible
//! given the recorded seeds.

use rand::SeedableRng;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream tag so that related generators
/// (per run, per epoch, per state) are decorrelated but reproducible.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
