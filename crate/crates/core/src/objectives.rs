//! Repair, sparsity and total losses, plus the training schedules.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Shift added to variances before square roots, on both operands.
pub const VARIANCE_SHIFT: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub task: f64,
    pub repair: f64,
    pub sparse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            task: 1.5,
            repair: 40.0,
            sparse: 200.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda_task", self.task), ("lambda_repair", self.repair), ("lambda_sparse", self.sparse)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be a finite non-negative number"));
            }
        }
        Ok(())
    }
}

/// Which moments the repair loss aligns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepairKind {
    MeanAndStd,
    MeanOnly,
}

/// Column means and (clamped) variances of a `T×D` matrix.
pub fn feature_moments<'t>(h: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let rows = {
        let v = h.value();
        if v.rank() != 2 {
            return Err(Error::shape("feature_moments", v.shape(), &[0, 0]));
        }
        v.rows()
    };
    if rows == 0 {
        return Err(Error::EmptyRegion("moment rows"));
    }
    let mu = h.mean_axis(0)?;
    let sq = h.mul(h)?.mean_axis(0)?;
    let v = sq.sub(&mu.mul(&mu)?)?;
    let negative: Vec<bool> = v.value().data().iter().map(|&x| x < 0.0).collect();
    let v = if negative.iter().any(|&n| n) { v.fill_where(&negative, 0.0)? } else { v };
    Ok((mu, v))
}

/// Plain-value moments, same arithmetic as [`feature_moments`].
pub fn moments_values(h: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if h.rank() != 2 {
        return Err(Error::shape("moments_values", h.shape(), &[0, 0]));
    }
    let (t, d) = (h.rows(), h.cols());
    if t == 0 {
        return Err(Error::EmptyRegion("moment rows"));
    }
    let mut mu = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for i in 0..t {
        for j in 0..d {
            let x = h.at(i, j);
            mu[j] += x;
            sq[j] += x * x;
        }
    }
    let v = (0..d)
        .map(|j| {
            mu[j] /= t as f64;
            (sq[j] / t as f64 - mu[j] * mu[j]).max(0.0)
        })
        .collect();
    Ok((mu, v))
}

/// `(1/D)‖μ_p − μ_o‖² + (1/D)‖√(v_p+ε) − √(v_o+ε)‖²`; the teacher side is detached.
pub fn repair_loss<'t>(h_p: &Var<'t>, h_o: &Var<'t>, kind: RepairKind) -> Result<Var<'t>> {
    let (dp, dq) = (h_p.shape(), h_o.shape());
    if dp.len() != 2 || dq.len() != 2 || dp[1] != dq[1] {
        return Err(Error::shape("repair_loss", &dp, &dq));
    }
    let h_o = h_o.stop_gradient();
    let (mp, vp) = feature_moments(h_p)?;
    let (mo, vo) = feature_moments(&h_o)?;
    let dmu = mp.sub(&mo)?;
    let mean_term = dmu.mul(&dmu)?.mean();
    match kind {
        RepairKind::MeanOnly => Ok(mean_term),
        RepairKind::MeanAndStd => {
            let sp = vp.affine(1.0, VARIANCE_SHIFT).sqrt();
            let so = vo.affine(1.0, VARIANCE_SHIFT).sqrt();
            let ds = sp.sub(&so)?;
            mean_term.add(&ds.mul(&ds)?.mean())
        }
    }
}

/// Plain-value W2² between the row distributions of two matrices.
pub fn w2sq_values(h_p: &Tensor, h_o: &Tensor) -> Result<f64> {
    if h_p.cols() != h_o.cols() {
        return Err(Error::shape("w2sq", h_p.shape(), h_o.shape()));
    }
    let (mp, vp) = moments_values(h_p)?;
    let (mo, vo) = moments_values(h_o)?;
    let d = mp.len() as f64;
    let mut mean_term = 0.0;
    let mut std_term = 0.0;
    for j in 0..mp.len() {
        mean_term += (mp[j] - mo[j]).powi(2);
        std_term += ((vp[j] + VARIANCE_SHIFT).sqrt() - (vo[j] + VARIANCE_SHIFT).sqrt()).powi(2);
    }
    Ok(mean_term / d + std_term / d)
}

/// `(1/N) Σ m̃_i`.
pub fn retention_ratio(m_tilde: &[f64]) -> f64 {
    if m_tilde.is_empty() {
        return 0.0;
    }
    m_tilde.iter().sum::<f64>() / m_tilde.len() as f64
}

/// Mean of per-layer ratios.
pub fn average_retention(per_layer: &[f64]) -> f64 {
    if per_layer.is_empty() {
        return 1.0;
    }
    per_layer.iter().sum::<f64>() / per_layer.len() as f64
}

/// Differentiable `r̄` from cumulative masks after each stage `(layer, m̃)`,
/// stages in increasing layer order.
pub fn average_retention_var<'t>(stages: &[(usize, Var<'t>)], n_layers: usize) -> Result<Var<'t>> {
    let first = stages.first().map(|s| s.0).unwrap_or(n_layers);
    let mut total: Option<Var<'t>> = None;
    for (k, (layer, m)) in stages.iter().enumerate() {
        let next = stages.get(k + 1).map(|s| s.0).unwrap_or(n_layers);
        if next < *layer {
            return Err(Error::config("pruner_layers", "must be strictly increasing"));
        }
        let span = (next - layer) as f64;
        let term = m.mean().scale(span);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    let dense = first as f64;
    match total {
        Some(t) => Ok(t.affine(1.0 / n_layers as f64, dense / n_layers as f64)),
        None => Err(Error::config("pruner_layers", "no pruning stage")),
    }
}

/// `|r̄ − r*|`.
pub fn sparsity_loss<'t>(r_bar: &Var<'t>, r_star: f64) -> Var<'t> {
    r_bar.affine(1.0, -r_star).abs()
}

/// Weighted sum of the three components.
pub fn total_loss<'t>(task: &Var<'t>, repair: &Var<'t>, sparse: &Var<'t>, w: &LossWeights) -> Result<Var<'t>> {
    for (name, v) in [("task", task), ("repair", repair), ("sparse", sparse)] {
        if !v.item().is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    task.scale(w.task).add(&repair.scale(w.repair))?.add(&sparse.scale(w.sparse))
}

/// Temperature, retention-target and learning-rate schedules over `total_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedules {
    pub total_steps: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub r_start: f64,
    pub r_target: f64,
    /// Fraction of training over which `r*` moves from `r_start` to `r_target`.
    pub r_anneal_frac: f64,
    pub lr: f64,
    /// Final learning rate as a fraction of the peak.
    pub lr_floor: f64,
}

impl Schedules {
    pub fn new(total_steps: usize, r_target: f64, lr: f64) -> Self {
        Self {
            total_steps,
            tau_start: 1.5,
            tau_end: 0.2,
            r_start: 1.0,
            r_target,
            r_anneal_frac: 0.3,
            lr,
            lr_floor: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(Error::config("tau_end", "temperatures must be positive"));
        }
        if !(0.0..=1.0).contains(&self.r_target) {
            return Err(Error::config("target_retention", "must lie in [0, 1]"));
        }
        if self.r_target > self.r_start {
            return Err(Error::config("target_retention", "must not exceed the starting retention"));
        }
        if !(0.0..=1.0).contains(&self.r_anneal_frac) {
            return Err(Error::config("r_anneal_frac", "must lie in [0, 1]"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config("lr", "must be non-negative"));
        }
        Ok(())
    }

    fn progress(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return 1.0;
        }
        (step.min(self.total_steps - 1)) as f64 / (self.total_steps - 1) as f64
    }

    pub fn tau(&self, step: usize) -> f64 {
        let p = self.progress(step);
        (1.0 - p) * self.tau_start + p * self.tau_end
    }

    pub fn r_star(&self, step: usize) -> f64 {
        let anneal = (self.r_anneal_frac * (self.total_steps - 1) as f64).max(0.0);
        let p = if anneal <= 0.0 { 1.0 } else { (step as f64 / anneal).min(1.0) };
        (1.0 - p) * self.r_start + p * self.r_target
    }

    /// Cosine decay from `lr` to `lr·lr_floor`.
    pub fn lr(&self, step: usize) -> f64 {
        let p = self.progress(step);
        let c = 0.5 * (1.0 + (PI * p).cos());
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn moments_examples() {
        let t = Tape::new();
        let (mu, v) = feature_moments(&t.constant(m(&[vec![1., 1.], vec![1., 1.]]))).unwrap();
        assert_eq!(mu.value().data(), &[1., 1.]);
        assert_eq!(v.value().data(), &[0., 0.]);
        let (mu, v) = feature_moments(&t.constant(m(&[vec![0., 0.], vec![2., 2.]]))).unwrap();
        assert_eq!(mu.value().data(), &[1., 1.]);
        assert_eq!(v.value().data(), &[1., 1.]);
        let (_, v) = feature_moments(&t.constant(m(&[vec![0.3, -7.1, 2.0]]))).unwrap();
        assert!(v.value().data().iter().all(|&x| x == 0.0));
        let empty = t.constant(Tensor::new(vec![0, 3], vec![]).unwrap());
        assert!(matches!(feature_moments(&empty), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn repair_examples() {
        let t = Tape::new();
        let a = t.constant(m(&[vec![0., 0.], vec![2., 2.]]));
        let b = t.constant(m(&[vec![1., 1.], vec![1., 1.]]));
        assert_eq!(repair_loss(&a, &a, RepairKind::MeanAndStd).unwrap().item(), 0.0);
        let want = ((1.0f64 + 1e-8).sqrt() - 1e-4).powi(2);
        let got = repair_loss(&a, &b, RepairKind::MeanAndStd).unwrap().item();
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        assert!((got - 1.0).abs() < 1e-3);
        assert_eq!(repair_loss(&a, &b, RepairKind::MeanOnly).unwrap().item(), 0.0);
        assert!((w2sq_values(&a.value(), &b.value()).unwrap() - got).abs() <= 1e-15);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(repair_loss(&a, &b, RepairKind::MeanAndStd), Err(Error::Shape { .. })));
    }

    #[test]
    fn retention_examples() {
        assert_eq!(retention_ratio(&[1., 1., 0., 0.]), 0.5);
        assert_eq!(average_retention(&[1.0; 8]), 1.0);
        let t = Tape::new();
        let s = vec![
            (2, t.constant(Tensor::vector(vec![1., 1., 0., 0.]))),
            (5, t.constant(Tensor::vector(vec![1., 0., 0., 0.]))),
        ];
        assert_eq!(average_retention_var(&s, 8).unwrap().item(), 0.53125);
    }

    #[test]
    fn sparsity_and_total() {
        let t = Tape::new();
        let r = t.param(Tensor::scalar(0.4));
        let s = sparsity_loss(&r, 0.3);
        assert!((s.item() - 0.1).abs() < 1e-15);
        assert_eq!(t.backward(s).unwrap().wrt(r).item(), 1.0);
        let one = t.constant(Tensor::scalar(1.0));
        let tot = total_loss(&one, &one, &one, &LossWeights::default()).unwrap();
        assert_eq!(tot.item(), 241.5);
        let nan = t.constant(Tensor::scalar(f64::NAN));
        let err = total_loss(&one, &nan, &one, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("repair"), "{err}");
    }

    #[test]
    fn schedule_endpoints_are_exact() {
        let s = Schedules::new(417, 0.11, 3e-3);
        assert_eq!(s.tau(0), 1.5);
        assert_eq!(s.tau(416), 0.2);
        assert_eq!(s.r_star(0), 1.0);
        assert_eq!(s.r_star(416), 0.11);
        assert_eq!(s.r_star(200), 0.11);
        assert_eq!(s.lr(0), 3e-3);
        assert!((s.lr(416) - 3e-4).abs() < 1e-18);
        for k in 1..417 {
            assert!(s.r_star(k) <= s.r_star(k - 1));
            assert!(s.tau(k) > 0.0);
        }
    }
}
