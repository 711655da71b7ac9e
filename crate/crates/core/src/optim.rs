//! Adam over a [`ParamStore`].

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| s.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(store),
            v: zeros(store),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update. Returns the L2 norm of the applied update.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<f64> {
        if grads.len() != store.len() {
            return Err(Error::shape("adam", &[store.len()], &[grads.len()]));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut norm_sq = 0.0;
        for (i, (p, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let u = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *x -= u;
                norm_sq += u * u;
            }
        }
        Ok(norm_sq.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_parameters_bitwise() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![0.1, -3.0]));
        let before = s.clone();
        let mut opt = Adam::new(&s);
        opt.step(&mut s, &[Tensor::vector(vec![1.0, 2.0])], 0.0).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![0.0, 0.0]));
        let mut opt = Adam::new(&s);
        opt.step(&mut s, &[Tensor::vector(vec![4.0, -0.5])], 0.01).unwrap();
        let w = s.tensors()[0].data();
        assert!((w[0] + 0.01).abs() < 1e-9 && (w[1] - 0.01).abs() < 1e-9);
    }
}
