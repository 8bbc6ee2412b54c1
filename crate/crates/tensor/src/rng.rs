//! Seeded random numbers. ChaCha8 is used everywhere so that a seed fully
//! determines weight initialization and batch sampling on every platform.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::{Float, Tensor};

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

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator derived from this seed and a stream number.
    /// Does not advance `self`.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng { seed: self.seed, inner }
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform float in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std).expect("std must be finite and non-negative").sample(&mut self.inner)
    }

    pub fn uniform_vec<T: Float>(&mut self, n: usize, bound: f64) -> Vec<T> {
        (0..n).map(|_| T::from_f64(self.uniform(-bound, bound))).collect()
    }

    pub fn normal_vec<T: Float>(&mut self, n: usize, std: f64) -> Vec<T> {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        (0..n).map(|_| T::from_f64(dist.sample(&mut self.inner))).collect()
    }

    /// Trainable tensor drawn from `U(-bound, bound)`.
    pub fn uniform_param<T: Float>(&mut self, shape: &[usize], bound: f64) -> Result<Tensor<T>> {
        let n = shape.iter().product();
        Tensor::param(self.uniform_vec(n, bound), shape)
    }

    /// Trainable tensor drawn from `N(0, std²)`.
    pub fn normal_param<T: Float>(&mut self, shape: &[usize], std: f64) -> Result<Tensor<T>> {
        let n = shape.iter().product();
        Tensor::param(self.normal_vec(n, std), shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        let va: Vec<f32> = a.uniform_vec(16, 1.0);
        let vb: Vec<f32> = b.uniform_vec(16, 1.0);
        assert_eq!(va, vb);
        assert_ne!(va, Rng::new(8).uniform_vec::<f32>(16, 1.0));
    }

    #[test]
    fn forks_differ_from_each_other() {
        let r = Rng::new(3);
        let a: Vec<f64> = r.fork(0).uniform_vec(4, 1.0);
        let b: Vec<f64> = r.fork(1).uniform_vec(4, 1.0);
        assert_ne!(a, b);
        assert_eq!(a, r.fork(0).uniform_vec::<f64>(4, 1.0));
    }

    #[test]
    fn uniform_respects_bounds() {
        let mut r = Rng::new(1);
        assert!(r.uniform_vec::<f64>(1000, 0.25).iter().all(|v| v.abs() <= 0.25));
        assert!((0..1000).all(|_| r.below(5) < 5));
    }
}
