//! Per-component RNG streams derived from one global seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mix `seed` with a stream label. Streams with different labels are
/// independent, so work can be split across threads without changing output.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a SplitMix64 finalizer over the combination.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}
