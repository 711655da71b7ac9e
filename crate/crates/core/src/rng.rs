//! Seeded randomness with independent substreams.
//!
//! Every draw comes from ChaCha8 (`rand_chacha::ChaCha8Rng`), a portable
//! counter-based generator. Substreams are derived by hashing
//! `(seed, purpose, step, layer)` through SplitMix64 into a fresh 64-bit seed,
//! so draws for one `(step, layer, purpose)` never depend on how many values
//! another stream consumed.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Smallest/largest uniform draw fed to the logistic transform.
pub const UNIFORM_CLAMP: f64 = 1e-7;

/// What a substream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Data = 2,
    GumbelNoise = 3,
    QueryDropout = 4,
    Shuffle = 5,
    Test = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

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

    /// Independent stream keyed by `(purpose, step, layer)`.
    pub fn substream(&self, purpose: Purpose, step: u64, layer: u64) -> Rng {
        let mut h = splitmix64(self.seed);
        h = splitmix64(h ^ purpose as u64);
        h = splitmix64(h ^ step);
        h = splitmix64(h ^ layer.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        Rng::new(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal() * std).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product")
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<usize> = (0..n).collect();
        for i in 0..k.min(n) {
            let j = i + self.below(n - i);
            all.swap(i, j);
        }
        all.truncate(k.min(n));
        all
    }

    /// I.i.d. standard logistic samples `log(u) − log(1 − u)`.
    pub fn logistic_noise(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| logistic_from_uniform(self.uniform())).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product")
    }
}

/// Logistic quantile of a uniform draw, clamped to `[1e-7, 1 − 1e-7]` first.
pub fn logistic_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    u.ln() - (1.0 - u).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_maps_to_zero() {
        assert_eq!(logistic_from_uniform(0.5), 0.0);
    }

    #[test]
    fn clamped_extremes_are_finite() {
        assert!(logistic_from_uniform(0.0).is_finite());
        assert!(logistic_from_uniform(1.0).is_finite());
    }

    #[test]
    fn logistic_moments_match_monte_carlo_targets() {
        let mut rng = Rng::new(7);
        let x = rng.logistic_noise(&[100_000]);
        let n = x.numel() as f64;
        let mean = x.sum() / n;
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        let target = std::f64::consts::PI.powi(2) / 3.0;
        assert!((var - target).abs() < 0.1, "var {var}");
    }

    #[test]
    fn equal_seeds_are_bitwise_equal() {
        let a = Rng::new(3).substream(Purpose::GumbelNoise, 10, 2).logistic_noise(&[64]);
        let b = Rng::new(3).substream(Purpose::GumbelNoise, 10, 2).logistic_noise(&[64]);
        assert_eq!(a, b);
        let c = Rng::new(3).substream(Purpose::GumbelNoise, 10, 3).logistic_noise(&[64]);
        assert_ne!(a, c);
    }
}
