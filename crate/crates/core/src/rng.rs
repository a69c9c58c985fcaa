//! Seed handling.
//!
//! Every stochastic routine takes a single `u64` seed. Child seeds for
//! sub-tasks (replicates, grid cells, noise vs. latent path) are derived with
//! [`derive_seed`], which mixes the parent seed and a stream index through two
//! rounds of SplitMix64. Derivation is order independent, so a grid cell gets
//! the same seed regardless of how many cells run before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(stream.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}
