//! Central finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of a scalar function against `(f(p+h) − f(p−h)) / 2h`
/// for every coordinate of every parameter.
///
/// The analytic pass records the frozen capture points of the tape
/// (stop-gradient, hard thresholds, detached statistics). Every perturbed
/// evaluation replays them, so the numeric derivative is taken of the same
/// surrogate function the straight-through gradient describes.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let tape = Tape::recording();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars)?;
    if !out.item().is_finite() {
        return Err(Error::NonFinite("gradcheck objective".into()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
    let log = tape.take_frozen();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let t = Tape::replaying(log.clone());
        let vs: Vec<Var<'_>> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let v = f(&t, &vs)?.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("gradcheck objective".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for c in 0..p.numel() {
            let base = p.data()[c];
            work[pi].data_mut()[c] = base + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[c] = base - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[c] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[c];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, c));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
