//! Deterministic seed derivation.
//!
//! All randomness in the crate flows through ChaCha streams whose seeds are
//! derived from a base seed plus a purpose tag and integer context. Derived
//! streams are independent of iteration order, so per-sample work can run in
//! parallel without changing results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over the tag and context words. Stable across platforms.
pub fn derive_seed(base: u64, tag: &str, ctx: &[u64]) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for &byte in tag.as_bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(PRIME);
    }
    for word in std::iter::once(base).chain(ctx.iter().copied()) {
        for byte in word.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

pub fn rng_for(base: u64, tag: &str, ctx: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(base, tag, ctx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_tags_give_distinct_seeds() {
        assert_ne!(derive_seed(7, "a", &[1]), derive_seed(7, "b", &[1]));
        assert_ne!(derive_seed(7, "a", &[1]), derive_seed(7, "a", &[2]));
        assert_ne!(derive_seed(7, "a", &[1]), derive_seed(8, "a", &[1]));
    }

    #[test]
    fn derivation_is_stable() {
        // Frozen: a change here silently invalidates every seeded artifact.
        assert_eq!(derive_seed(0, "", &[]), 0xa8c7f832281a39c5);
    }
}
