//! Keyed deterministic randomness.
//!
//! Every random decision in an audit is drawn from a generator whose seed is a
//! SHA-256 digest of `(domain, seed, key)`. Decisions therefore depend only on
//! what they are about, never on evaluation order or thread scheduling.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub fn keyed_seed(domain: &str, seed: u64, key: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.update([0u8]);
    h.update(key.as_bytes());
    h.finalize().into()
}

pub fn keyed_rng(domain: &str, seed: u64, key: &str) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(keyed_seed(domain, seed, key))
}

/// Uniform integer in `0..n` by rejection sampling on raw 64-bit draws.
pub fn uniform_below<R: RngCore>(rng: &mut R, n: u64) -> u64 {
    assert!(n > 0, "empty range");
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return v % n;
        }
    }
}

/// Uniform real in `[0, 1)` with 53 bits of precision.
pub fn unit_f64<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// In-place Fisher-Yates shuffle driven by [`uniform_below`].
pub fn fisher_yates<T, R: RngCore>(rng: &mut R, slice: &mut [T]) {
    for i in (1..slice.len()).rev() {
        let j = uniform_below(rng, i as u64 + 1) as usize;
        slice.swap(i, j);
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
