//! Residual cross-attention pruner and cumulative keep masks.
//!
//! Retention logits are `A + S_a + S_t + bias`: an intrinsic stream from the
//! backbone's own question→vision attention, a cross-attention stream from
//! question-conditioned learnable queries, and a per-token MLP stream.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{sigmoid_scalar, Var};
use crate::tensor::Tensor;

/// Floor applied to aggregated attention before the logarithm.
pub const ATTENTION_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct PrunerConfig {
    pub n_queries: usize,
    /// Width of the token-score projection.
    pub d_p: usize,
    pub bias_init: f64,
    pub query_dropout: f64,
}

impl PrunerConfig {
    pub fn for_width(d: usize) -> Self {
        Self {
            n_queries: 16,
            d_p: (d / 2).max(1),
            bias_init: 2.0,
            query_dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 {
            return Err(Error::config("n_queries", "must be positive"));
        }
        if self.d_p == 0 {
            return Err(Error::config("d_p", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.query_dropout) {
            return Err(Error::config("query_dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Parameter handles of one pruning stage.
#[derive(Clone, Debug)]
pub struct PrunerParams {
    pub qp: ParamId,
    pub agg: ParamId,
    /// Extra key projection applied after the backbone's own key map.
    pub wkp: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
    pub bias: ParamId,
}

impl PrunerParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, cfg: &PrunerConfig, rng: &mut Rng) -> Self {
        let p = |n: &str| format!("{prefix}.{n}");
        let dp = cfg.d_p;
        let mut wkp = Tensor::identity(d);
        for (x, n) in wkp.data_mut().iter_mut().zip(rng.normal_tensor(&[d, d], 0.01).data()) {
            *x += n;
        }
        Self {
            qp: store.add(p("qp"), rng.normal_tensor(&[cfg.n_queries, d], 1.0)),
            agg: store.add(p("agg"), Tensor::zeros(&[cfg.n_queries])),
            wkp: store.add(p("wkp"), wkp),
            proj_w: store.add(p("proj_w"), rng.normal_tensor(&[d, dp], 1.0 / (d as f64).sqrt())),
            proj_b: store.add(p("proj_b"), Tensor::zeros(&[dp])),
            w2: store.add(p("w2"), rng.normal_tensor(&[dp, dp], 1.0 / (dp as f64).sqrt())),
            b2: store.add(p("b2"), Tensor::zeros(&[dp])),
            w3: store.add(p("w3"), rng.normal_tensor(&[dp, 1], 0.1 / (dp as f64).sqrt())),
            b3: store.add(p("b3"), Tensor::zeros(&[1])),
            bias: store.add(p("bias"), Tensor::scalar(cfg.bias_init)),
        }
    }
}

/// `Q_p' = Q_p + mean of the first q_effective question rows`, broadcast over queries.
pub fn condition_queries<'t>(qp: &Var<'t>, question: &Var<'t>, q_effective: usize) -> Result<Var<'t>> {
    if q_effective == 0 {
        return Err(Error::EmptyRegion("question tokens"));
    }
    let rows: Vec<usize> = (0..q_effective).collect();
    let summary = question.gather_rows(&rows)?.mean_axis(0)?;
    qp.add_row(&summary)
}

/// Aggregated cross-attention of the pruning queries over vision keys.
///
/// `dead` columns are excluded from every softmax row. `dropped` marks query
/// rows removed by query-wise dropout; the remaining aggregation weights are
/// renormalized by the softmax itself.
pub fn cross_attention_score<'t>(
    qp_prime: &Var<'t>,
    kv: &Var<'t>,
    agg: &Var<'t>,
    dead: &[bool],
    dropped: Option<&[bool]>,
) -> Result<Var<'t>> {
    let (nq, d) = {
        let q = qp_prime.value();
        (q.rows(), q.cols())
    };
    let n = dead.len();
    let scores = qp_prime.matmul(&kv.transpose())?.scale(1.0 / (d as f64).sqrt());
    let full_mask: Vec<bool> = (0..nq).flat_map(|_| dead.iter().copied()).collect();
    let rows = scores.fill_where(&full_mask, f64::NEG_INFINITY)?.softmax_lastdim()?;
    let agg = match dropped {
        Some(m) => agg.fill_where(m, f64::NEG_INFINITY)?,
        None => *agg,
    };
    let w = agg.softmax_lastdim()?.reshape(&[1, nq])?;
    w.matmul(&rows)?.reshape(&[n])
}

/// Query-wise dropout draw. At least one query always survives.
pub fn draw_query_dropout(rng: &mut Rng, n_queries: usize, p: f64) -> Vec<bool> {
    let mut dropped: Vec<bool> = (0..n_queries).map(|_| rng.bernoulli(p)).collect();
    if dropped.iter().all(|&x| x) {
        dropped[rng.below(n_queries)] = false;
    }
    dropped
}

/// `S_t = W3·gelu(W2·proj(h_v) + b2) + b3`, one scalar per row.
pub fn token_score<'t>(x: &Var<'t>, vars: &Bound<'t>, p: &PrunerParams) -> Result<Var<'t>> {
    let n = x.value().rows();
    x.matmul(&vars[p.proj_w])?
        .add_row(&vars[p.proj_b])?
        .matmul(&vars[p.w2])?
        .add_row(&vars[p.b2])?
        .gelu()
        .matmul(&vars[p.w3])?
        .add_row(&vars[p.b3])?
        .reshape(&[n])
}

/// `A_i = log a_i − masked mean of log a over retained tokens`.
pub fn intrinsic_score(a: &[f64], m_tilde: &[f64]) -> Result<Tensor> {
    if a.len() != m_tilde.len() {
        return Err(Error::shape("intrinsic_score", &[a.len()], &[m_tilde.len()]));
    }
    let logs: Vec<f64> = a.iter().map(|&x| x.max(ATTENTION_FLOOR).ln()).collect();
    let kept: f64 = m_tilde.iter().sum();
    if kept < 0.5 {
        return Err(Error::DegenerateMask);
    }
    let center = logs.iter().zip(m_tilde).map(|(l, m)| l * m).sum::<f64>() / kept;
    Ok(Tensor::vector(logs.iter().map(|l| l - center).collect()))
}

/// `A + S_a + S_t + bias`, with dead positions pinned to `-inf`.
pub fn combine_logits<'t>(a: &Var<'t>, s_a: &Var<'t>, s_t: &Var<'t>, bias: &Var<'t>, dead: &[bool]) -> Result<Var<'t>> {
    a.add(s_a)?.add(s_t)?.add_scalar(bias)?.fill_where(dead, f64::NEG_INFINITY)
}

/// Gumbel-Sigmoid with a straight-through threshold.
pub fn sample_mask_train<'t>(logits: &Var<'t>, tau: f64, noise: &Tensor) -> Result<Var<'t>> {
    if tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::config("tau", "must be positive"));
    }
    let eps = logits.tape().constant(noise.clone());
    logits.add(&eps)?.scale(1.0 / tau).sigmoid().straight_through()
}

/// Deterministic mask `1[sigmoid(logit/τ) > 0.5]`.
pub fn threshold_mask_infer(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::config("tau", "must be positive"));
    }
    Ok(logits
        .iter()
        .map(|&l| if sigmoid_scalar(l / tau) > 0.5 { 1.0 } else { 0.0 })
        .collect())
}

/// Elementwise product of the previous cumulative mask and a layer mask.
pub fn update_cumulative(prev: &[f64], m: &[f64]) -> Result<Vec<f64>> {
    if prev.len() != m.len() {
        return Err(Error::shape("update_cumulative", &[prev.len()], &[m.len()]));
    }
    Ok(prev.iter().zip(m).map(|(a, b)| a * b).collect())
}

/// Running keep state of the vision tokens within one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CumulativeMask {
    m_tilde: Vec<f64>,
    /// `(layer, layer mask)` for each executed pruning stage.
    history: Vec<(usize, Vec<f64>)>,
    /// Cumulative mask after each stage.
    cumulative: Vec<Vec<f64>>,
}

impl CumulativeMask {
    pub fn dense(n: usize) -> Self {
        Self {
            m_tilde: vec![1.0; n],
            history: Vec::new(),
            cumulative: Vec::new(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.m_tilde
    }

    pub fn history(&self) -> &[(usize, Vec<f64>)] {
        &self.history
    }

    /// Cumulative mask after stage `k`.
    pub fn after_stage(&self, k: usize) -> &[f64] {
        &self.cumulative[k]
    }

    pub fn dead(&self) -> Vec<bool> {
        self.m_tilde.iter().map(|&m| m < 0.5).collect()
    }

    pub fn kept(&self) -> usize {
        self.m_tilde.iter().filter(|&&m| m >= 0.5).count()
    }

    /// Records a layer mask and updates the product. Layer masks are rounded to 0/1.
    pub fn update(&mut self, layer: usize, m: &[f64]) -> Result<()> {
        let hard: Vec<f64> = m.iter().map(|&x| if x >= 0.5 { 1.0 } else { 0.0 }).collect();
        self.m_tilde = update_cumulative(&self.m_tilde, &hard)?;
        self.history.push((layer, hard));
        self.cumulative.push(self.m_tilde.clone());
        Ok(())
    }

    /// Fraction of vision tokens retained at each decoder layer. Layers before
    /// the first stage count as dense; others inherit the nearest preceding stage.
    pub fn per_layer_retention(&self, n_layers: usize) -> Vec<f64> {
        let n = self.m_tilde.len() as f64;
        let mut out = Vec::with_capacity(n_layers);
        let mut current = 1.0;
        let mut k = 0;
        for layer in 0..n_layers {
            while k < self.history.len() && self.history[k].0 == layer {
                current = self.cumulative[k].iter().sum::<f64>() / n;
                k += 1;
            }
            out.push(current);
        }
        out
    }
}

/// Top-K keep count per stage so that uniform stages meet an average retention
/// of `r_star` when the first stage sits at `first_layer`.
pub fn topk_budget(n_vision: usize, n_layers: usize, first_layer: usize, r_star: f64) -> usize {
    let span = (n_layers - first_layer) as f64;
    let r = (r_star * n_layers as f64 - first_layer as f64) / span;
    ((r * n_vision as f64).round() as usize).clamp(1, n_vision)
}

/// Keeps the `k` highest-scoring live tokens (ties broken by lower index).
pub fn topk_mask(scores: &[f64], dead: &[bool], k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| !dead[i]).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut m = vec![0.0; scores.len()];
    for &i in idx.iter().take(k) {
        m[i] = 1.0;
    }
    m
}
