//! Seed derivation for deterministic, independently-streamed RNGs.
//!
//! Every randomized stage derives its own stream from the scenario seed and
//! a tag path (vine id, view id, shard index, ...), so stages can run in any
//! order or in parallel without perturbing each other's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a reproducible RNG for the sub-stream of `seed` named by `tags`.
pub fn derive(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix(seed);
    for &t in tags {
        s = splitmix(s ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    ChaCha8Rng::seed_from_u64(s)
}
