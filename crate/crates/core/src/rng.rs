//! Seeded randomness. Every layout and every noise stream is derived from a
//! 64-bit seed through SplitMix64 so runs are reproducible bit-for-bit.

use rand::{Rng, SeedableRng};
pub use rand_xoshiro::SplitMix64;

pub fn seeded(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Derives an independent child seed from `seed` and a stream tag.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform integer in `0..n`.
pub fn below(rng: &mut SplitMix64, n: u64) -> u64 {
    rng.random_range(0..n)
}
