//! Seeded random number generation.
//!
//! Every random draw in the crate goes through [`Rng`], a ChaCha8 stream
//! cipher generator. ChaCha8 output is specified bit-for-bit, so a seed
//! reproduces the same stream on every platform.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub const ALGORITHM: &str = "ChaCha8";

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for a named purpose, derived from a base seed.
    /// Streams for distinct `(seed, label, index)` triples do not overlap.
    pub fn derive(seed: u64, label: &str, index: u64) -> Self {
        Self::new(derive_seed(seed, label, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    pub fn uniform(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f32 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_tensor(&mut self, shape: impl Into<Vec<usize>>, std: f32) -> Tensor {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal() * std).collect();
        Tensor::new(shape, data).expect("shape and data agree")
    }

    pub fn uniform_tensor(&mut self, shape: impl Into<Vec<usize>>, lo: f32, hi: f32) -> Tensor {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * self.uniform()).collect();
        Tensor::new(shape, data).expect("shape and data agree")
    }
}

/// Mixes a label and index into a base seed (FNV-1a over the label, then
/// a splitmix64 finalizer).
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(label.as_bytes());
    let mut z = seed ^ h.finish().rotate_left(17) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
