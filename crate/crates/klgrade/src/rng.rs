//! Seed derivation for reproducible, independently-streamed randomness.
//!
//! Everything random in this crate flows from one root `u64` seed. Per-sample
//! (or per-purpose) generators are derived by hashing `(seed, index)` so that
//! samples can be generated in any order, or in parallel, without changing
//! their content.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// SplitMix64 finalizer; full-period mixing of a 64-bit word.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xA24B_AED4_963E_E407))
}

/// Derive a stream seed from `(seed, label)`; used to keep unrelated
/// consumers (weight init, shuffling, noise, ...) on disjoint streams.
pub fn derive_seed_str(seed: u64, label: &str) -> u64 {
    let mut h = splitmix64(seed);
    for &b in label.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

/// The deterministic generator used throughout the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let a = derive_seed(42, 0);
        let b = derive_seed(42, 1);
        let c = derive_seed(43, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(42, 0));
    }

    #[test]
    fn rng_is_reproducible() {
        let mut r1 = rng_from_seed(7);
        let mut r2 = rng_from_seed(7);
        let x1: [u64; 4] = core::array::from_fn(|_| r1.random());
        let x2: [u64; 4] = core::array::from_fn(|_| r2.random());
        assert_eq!(x1, x2);
    }

    #[test]
    fn label_streams_differ() {
        assert_ne!(derive_seed_str(1, "init"), derive_seed_str(1, "shuffle"));
    }
}
