//! Analytic cost accounting, layer-wise drift and retention reports.

use crate::error::{Error, Result};
use crate::objectives::w2sq_values;
use crate::pruner::CumulativeMask;
use crate::tensor::Tensor;

/// Formula line written at the top of efficiency reports.
pub const FLOPS_FORMULA: &str = "flops = sum_l [ 8*s_l*d^2 + 4*s_l^2*d + 4*s_l*d*d_ff ]; kv_bytes = sum_l s_l*2*d*bytes_per_element";

#[derive(Clone, Debug, PartialEq)]
pub struct CostModel {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub bytes_per_element: usize,
    /// Sequence length entering each layer.
    pub seq_lens: Vec<usize>,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.seq_lens.len() != self.n_layers {
            return Err(Error::shape("cost model", &[self.seq_lens.len()], &[self.n_layers]));
        }
        Ok(())
    }

    /// `s_ℓ = n_fixed + round(retention_ℓ · n_vision)`.
    pub fn from_retention(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        bytes_per_element: usize,
        n_fixed: usize,
        n_vision: usize,
        retention: &[f64],
    ) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_ff,
            bytes_per_element,
            seq_lens: retention
                .iter()
                .map(|r| n_fixed + (r * n_vision as f64).round() as usize)
                .collect(),
        }
    }
}

/// `Σ_ℓ 8·s·d² + 4·s²·d + 4·s·d·d_ff`.
pub fn flops_total(c: &CostModel) -> u128 {
    let d = c.d_model as u128;
    let f = c.d_ff as u128;
    c.seq_lens
        .iter()
        .map(|&s| {
            let s = s as u128;
            8 * s * d * d + 4 * s * s * d + 4 * s * d * f
        })
        .sum()
}

/// `Σ_ℓ s·2·d·bytes_per_element`.
pub fn kv_cache_bytes(c: &CostModel) -> u128 {
    let per = 2 * c.d_model as u128 * c.bytes_per_element as u128;
    c.seq_lens.iter().map(|&s| s as u128 * per).sum()
}

/// Per-layer W2² between student and teacher answer rows (one matrix per layer).
pub fn layer_drift(teacher: &[Tensor], student: &[Tensor]) -> Result<Vec<(usize, f64)>> {
    if teacher.len() != student.len() {
        return Err(Error::shape("layer_drift", &[teacher.len()], &[student.len()]));
    }
    teacher
        .iter()
        .zip(student)
        .enumerate()
        .map(|(l, (t, s))| Ok((l, w2sq_values(s, t)?)))
        .collect()
}

/// Retention percentage after each pruning stage, averaged over examples.
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionReport {
    pub target: f64,
    pub layers: Vec<usize>,
    pub percent: Vec<f64>,
}

impl RetentionReport {
    pub fn from_masks(target: f64, masks: &[CumulativeMask]) -> Result<Self> {
        let first = masks.first().ok_or(Error::EmptyRegion("evaluated examples"))?;
        let layers: Vec<usize> = first.history().iter().map(|h| h.0).collect();
        let mut percent = vec![0.0; layers.len()];
        for m in masks {
            if m.history().len() != layers.len() {
                return Err(Error::shape("retention report", &[m.history().len()], &[layers.len()]));
            }
            for (k, p) in percent.iter_mut().enumerate() {
                let c = m.after_stage(k);
                *p += c.iter().sum::<f64>() / c.len() as f64;
            }
        }
        for p in &mut percent {
            *p *= 100.0 / masks.len() as f64;
        }
        Ok(Self { target, layers, percent })
    }

    /// True when percentages never increase from one stage to the next.
    pub fn is_monotone(&self) -> bool {
        self.percent.windows(2).all(|w| w[1] <= w[0])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,percent\n");
        for (l, p) in self.layers.iter().zip(&self.percent) {
            s.push_str(&format!("{l},{p:.4}\n"));
        }
        s
    }

    /// One-line table row: target, then a column per stage.
    pub fn table_row(&self) -> String {
        let cols: Vec<String> = self.percent.iter().map(|p| format!("{p:.2}%")).collect();
        format!("r*={:.2} | {}", self.target, cols.join(" | "))
    }
}

pub fn drift_csv(drift: &[(usize, f64)]) -> String {
    let mut s = String::from("layer,w2sq\n");
    for (l, w) in drift {
        s.push_str(&format!("{l},{w:e}\n"));
    }
    s
}

/// Efficiency rows for a set of retention profiles against the dense model.
pub fn efficiency_csv(rows: &[(String, CostModel)], dense: &CostModel) -> String {
    let (f0, b0) = (flops_total(dense) as f64, kv_cache_bytes(dense) as f64);
    let mut s = format!("# {FLOPS_FORMULA}\nname,flops,kv_bytes,flops_ratio,cache_ratio,latency\n");
    for (name, c) in rows {
        let (f, b) = (flops_total(c), kv_cache_bytes(c));
        s.push_str(&format!(
            "{name},{f},{b},{:.6},{:.6},not-modeled\n",
            f as f64 / f0,
            b as f64 / b0
        ));
    }
    s
}
