//! Seedable, splittable random streams.
//!
//! Every stream is a ChaCha12 keystream whose key is the SHA-256 digest of
//! the parent key and a label. Child streams are therefore independent of
//! how many draws the parent has made, which lets data generation, dropout
//! masks and Gumbel noise be reseeded separately.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub const RNG_ALGORITHM: &str = "chacha12-sha256-split/v1";

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    key: [u8; 32],
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(RNG_ALGORITHM.as_bytes());
        hasher.update(seed.to_le_bytes());
        Self::from_key(seed, hasher.finalize().into())
    }

    fn from_key(seed: u64, key: [u8; 32]) -> Self {
        Self {
            seed,
            key,
            inner: ChaCha12Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Child stream for `label`. Does not advance `self`.
    pub fn derive(&self, label: &str) -> RngStream {
        let mut hasher = Sha256::new();
        hasher.update(self.key);
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        Self::from_key(self.seed, hasher.finalize().into())
    }

    pub fn derive_index(&self, label: &str, index: u64) -> RngStream {
        self.derive(&format!("{label}#{index}"))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform in the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform_open().ln()).ln()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derive_is_independent_of_parent_position() {
        let a = RngStream::new(7);
        let mut b = RngStream::new(7);
        b.next_u64();
        b.next_u64();
        let mut ca = a.derive("dropout");
        let mut cb = b.derive("dropout");
        assert_eq!(ca.next_u64(), cb.next_u64());
        let mut other = a.derive("gumbel");
        assert_ne!(a.derive("dropout").next_u64(), other.next_u64());
    }

    #[test]
    fn pinned_first_draw() {
        // Guards cross-platform stability of the stream definition.
        let first = RngStream::new(0).next_u64();
        assert_eq!(first, 9385938682401682672);
        assert_ne!(first, RngStream::new(1).next_u64());
    }
}
