//! Seed splitting.
//!
//! Every consumer of randomness derives its own stream from the master seed
//! and a stable text label, e.g. `derive_seed(master, "data/train")`. The
//! mapping is FNV-1a over the label followed by a SplitMix64 finalizer, so it
//! is stable across platforms and compiler versions (unlike `DefaultHasher`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` for the consumer named `label`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(master ^ splitmix64(h))
}

/// Deterministic generator for the consumer named `label`.
pub fn rng_for(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}
