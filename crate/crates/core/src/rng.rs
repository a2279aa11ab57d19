//! Deterministic randomness.
//!
//! Every random draw in the crate goes through [`SeededRng`], a ChaCha8
//! stream cipher generator seeded with `ChaCha8Rng::seed_from_u64(seed)`.
//! ChaCha8 output is specified bit-for-bit, so the same seed yields the same
//! stream on every platform. Normal variates come from `rand_distr::Normal`.
//!
//! Component seeds are derived from a single root seed with
//! `root ^ fnv1a64(component_name)`, so adding or reordering components never
//! shifts the stream another component sees.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Generator for a named component under `root`.
    pub fn for_component(root: u64, component: &str) -> Self {
        Self::new(derive_seed(root, component))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

pub fn derive_seed(root: u64, component: &str) -> u64 {
    root ^ fnv1a64(component.as_bytes())
}
