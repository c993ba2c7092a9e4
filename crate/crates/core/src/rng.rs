//! Seed derivation.
//!
//! Every random quantity is drawn from a stream derived from one root seed and
//! a tuple of tags (for example `(class, repeat)`), so results do not depend
//! on evaluation order or on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a root seed with a sequence of tags into a child seed.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(root);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

/// A random stream for `(root, tags...)`.
pub fn stream(root: u64, tags: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(7, &[]), derive_seed(8, &[]));
    }
}
