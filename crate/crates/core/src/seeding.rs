//! Seed derivation for independent, order-free random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a run seed and a stream tag (group code, stage
/// name, ...). Streams with different tags are independent and do not depend
/// on the order in which they are created.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01B3);
    }
    mix64(mix64(seed) ^ h)
}

/// Seeded generator for a named stream. ChaCha8 output is stable across
/// platforms and crate versions, which keeps artifacts reproducible.
pub fn stream_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn tags_give_distinct_streams() {
        assert_ne!(derive_seed(7, "AF"), derive_seed(7, "AM"));
        assert_ne!(derive_seed(7, "AF"), derive_seed(8, "AF"));
        let a: u64 = stream_rng(1, "x").random();
        let b: u64 = stream_rng(1, "x").random();
        assert_eq!(a, b);
    }
}
