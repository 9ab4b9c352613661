//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit [`Rng`]. The generator is
//! ChaCha8, a counter-based stream cipher, so independent streams can be
//! derived from one 64-bit run seed by selecting a stream id.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Float, Tensor};

/// Well-known stream ids derived from a run seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const FEEDBACK_NOISE: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const EVAL_DATA: u64 = 6;
    pub const FEATURES: u64 = 7;
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// An independent stream for `(seed, stream)`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec<F: Float>(&mut self, n: usize) -> Vec<F> {
        (0..n).map(|_| F::of(self.normal())).collect()
    }

    pub fn normal_tensor<F: Float>(&mut self, shape: &[usize]) -> Tensor<F> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, self.normal_vec(n)).expect("shape matches by construction")
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.inner.random_range(0..items.len())]
    }
}
