//! Delayed repair adapter: cached pruning context plus a FiLM-modulated
//! bottleneck correction applied to answer rows only.

use crate::error::{Error, Result};
use crate::layout::RegionGate;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    /// Bottleneck width.
    pub d_b: usize,
    pub alpha_init: f64,
}

impl AdapterConfig {
    pub fn for_width(d: usize) -> Self {
        Self {
            d_b: (d / 4).max(1),
            alpha_init: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_b == 0 {
            return Err(Error::config("d_b", "must be positive"));
        }
        Ok(())
    }
}

/// Context encoder shared by all pruning stages: query `q` and the two projections.
#[derive(Clone, Debug)]
pub struct ContextParams {
    pub q: ParamId,
    pub mask_w: ParamId,
    pub mask_b: ParamId,
    pub pruned_w: ParamId,
    pub pruned_b: ParamId,
}

impl ContextParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Self {
        let p = |n: &str| format!("{prefix}.{n}");
        let s = 1.0 / (d as f64).sqrt();
        Self {
            q: store.add(p("q"), rng.normal_tensor(&[d], s)),
            mask_w: store.add(p("mask_w"), rng.normal_tensor(&[d, d], s)),
            mask_b: store.add(p("mask_b"), Tensor::zeros(&[d])),
            pruned_w: store.add(p("pruned_w"), rng.normal_tensor(&[d, d], s)),
            pruned_b: store.add(p("pruned_b"), Tensor::zeros(&[d])),
        }
    }
}

/// One repair adapter.
#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub query_w: ParamId,
    pub query_b: ParamId,
    pub w_gamma: ParamId,
    pub w_beta: ParamId,
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up: ParamId,
    pub alpha: ParamId,
}

impl AdapterParams {
    /// `Up`, `W_γ` and `W_β` start at zero, so the adapter is the identity.
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, cfg: &AdapterConfig, rng: &mut Rng) -> Self {
        let p = |n: &str| format!("{prefix}.{n}");
        let s = 1.0 / (d as f64).sqrt();
        let db = cfg.d_b;
        Self {
            query_w: store.add(p("query_w"), rng.normal_tensor(&[d, d], s)),
            query_b: store.add(p("query_b"), Tensor::zeros(&[d])),
            w_gamma: store.add(p("w_gamma"), Tensor::zeros(&[d, db])),
            w_beta: store.add(p("w_beta"), Tensor::zeros(&[d, db])),
            down_w: store.add(p("down_w"), rng.normal_tensor(&[d, db], s)),
            down_b: store.add(p("down_b"), Tensor::zeros(&[db])),
            up: store.add(p("up"), Tensor::zeros(&[db, d])),
            alpha: store.add(p("alpha"), Tensor::scalar(cfg.alpha_init)),
        }
    }
}

/// Cached context of one pruning stage.
#[derive(Clone, Copy, Debug)]
pub struct RepairContext<'t> {
    pub e_mask: Var<'t>,
    pub e_pruned: Var<'t>,
    pub source_layer: usize,
}

/// Encodes `(e_mask, e_pruned)` for one pruning stage.
///
/// `m` is the stage's layer mask over all vision tokens, `p_v` the positional
/// rows of the vision segment and `h_v` the stage's vision hidden rows. The
/// pruned summary averages `h_v` with `weights` (tokens removed at this stage),
/// falling back to the zero vector when nothing was removed.
pub fn encode_context<'t>(
    vars: &Bound<'t>,
    p: &ContextParams,
    m: &Var<'t>,
    p_v: &Var<'t>,
    h_v: &Var<'t>,
    weights: &Var<'t>,
    source_layer: usize,
) -> Result<RepairContext<'t>> {
    let d = p_v.value().cols();
    let masked_p = p_v.transpose().mul_row(m)?.transpose();
    let q = vars[p.q].reshape(&[1, d])?;
    let attn = q.matmul(&masked_p.transpose())?.softmax_lastdim()?;
    let e_mask = attn
        .matmul(&masked_p)?
        .matmul(&vars[p.mask_w])?
        .reshape(&[d])?
        .add(&vars[p.mask_b])?;
    let removed = weights.value().sum();
    let e_pruned = if removed < 0.5 {
        h_v.tape().constant(Tensor::zeros(&[d]))
    } else {
        h_v.masked_mean_rows(weights)?
            .reshape(&[1, d])?
            .matmul(&vars[p.pruned_w])?
            .reshape(&[d])?
            .add(&vars[p.pruned_b])?
    };
    Ok(RepairContext {
        e_mask,
        e_pruned,
        source_layer,
    })
}

/// `cond = mean_k(e_mask + e_pruned)` broadcast over rows, plus `QueryProj(x)`.
pub fn build_conditioning<'t>(x: &Var<'t>, contexts: &[RepairContext<'t>], vars: &Bound<'t>, p: &AdapterParams) -> Result<Var<'t>> {
    if contexts.is_empty() {
        return Err(Error::config("adapter_layers", "repair adapter has no preceding pruning stage"));
    }
    let rows = x.value().rows();
    let mut acc = contexts[0].e_mask.add(&contexts[0].e_pruned)?;
    for c in &contexts[1..] {
        acc = acc.add(&c.e_mask)?.add(&c.e_pruned)?;
    }
    let ctx = acc.scale(1.0 / contexts.len() as f64);
    x.matmul(&vars[p.query_w])?
        .add_row(&vars[p.query_b])?
        .add(&ctx.broadcast_rows(rows)?)
}

/// `Δh = α·(γ ⊙ gelu(Down(x)) + β)·Up` with `γ = 1 + cond·W_γ`, `β = cond·W_β`.
pub fn film_correction<'t>(x: &Var<'t>, cond: &Var<'t>, vars: &Bound<'t>, p: &AdapterParams) -> Result<Var<'t>> {
    let gamma = cond.matmul(&vars[p.w_gamma])?.affine(1.0, 1.0);
    let beta = cond.matmul(&vars[p.w_beta])?;
    let z = x.matmul(&vars[p.down_w])?.add_row(&vars[p.down_b])?.gelu();
    gamma.mul(&z)?.add(&beta)?.matmul(&vars[p.up])?.mul_scalar(&vars[p.alpha])
}

/// `x + g ⊙ Δh`. Rows with `g = 0` are copied from `x` untouched.
pub fn apply_repair<'t>(x: &Var<'t>, delta: &Var<'t>, g: &RegionGate) -> Result<Var<'t>> {
    let rows = x.value().rows();
    if g.len() != rows {
        return Err(Error::shape("apply_repair", &[rows], &[g.len()]));
    }
    let active = g.active_rows();
    if active.is_empty() {
        return Ok(*x);
    }
    let repaired = x.gather_rows(&active)?.add(&delta.gather_rows(&active)?)?;
    let mut idx: Vec<usize> = (0..rows).collect();
    for (k, &r) in active.iter().enumerate() {
        idx[r] = rows + k;
    }
    Var::concat_rows(&[*x, repaired])?.gather_rows(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::SequenceLayout;
    use crate::tape::Tape;

    fn setup(d: usize) -> (ParamStore, ContextParams, AdapterParams) {
        let mut s = ParamStore::new();
        let mut rng = Rng::new(4);
        let c = ContextParams::init(&mut s, "ctx", d, &mut rng);
        let a = AdapterParams::init(&mut s, "ad", d, &AdapterConfig::for_width(d), &mut rng);
        (s, c, a)
    }

    #[test]
    fn nothing_pruned_gives_zero_pruned_embedding() {
        let (s, c, _) = setup(4);
        let t = Tape::new();
        let v = s.bind(&t, false);
        let mut rng = Rng::new(1);
        let m = t.constant(Tensor::ones(&[3]));
        let p = t.constant(rng.normal_tensor(&[3, 4], 1.0));
        let h = t.constant(rng.normal_tensor(&[3, 4], 1.0));
        let w = t.constant(Tensor::zeros(&[3]));
        let ctx = encode_context(&v, &c, &m, &p, &h, &w, 0).unwrap();
        assert_eq!(ctx.e_pruned.value().data(), &[0.0; 4]);
    }

    #[test]
    fn identical_positions_give_projected_row() {
        let (s, c, _) = setup(4);
        let t = Tape::new();
        let v = s.bind(&t, false);
        let row = vec![0.3, -1.0, 2.0, 0.5];
        let p = t.constant(Tensor::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap());
        let m = t.constant(Tensor::ones(&[3]));
        let w = t.constant(Tensor::zeros(&[3]));
        let ctx = encode_context(&v, &c, &m, &p, &p, &w, 0).unwrap();
        let want = Tensor::matrix(1, 4, row).unwrap().matmul(s.get(c.mask_w)).unwrap();
        let got = ctx.e_mask.value().clone();
        for k in 0..4 {
            assert!((got.data()[k] - want.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_adapter_is_identity_and_zero_alpha_closes_gate() {
        let (mut s, c, a) = setup(8);
        let layout = SequenceLayout::new(1, 3, 2, 1, 2).unwrap();
        let g = layout.build_gate().unwrap();
        let mut rng = Rng::new(9);
        let x = rng.normal_tensor(&[8, 8], 1.0);
        {
            let t = Tape::new();
            let v = s.bind(&t, false);
            let xv = t.constant(x.clone());
            let m = t.constant(Tensor::vector(vec![1.0, 0.0, 1.0]));
            let p = t.constant(rng.normal_tensor(&[3, 8], 1.0));
            let w = t.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
            let ctx = encode_context(&v, &c, &m, &p, &p, &w, 0).unwrap();
            let cond = build_conditioning(&xv, &[ctx], &v, &a).unwrap();
            let dh = film_correction(&xv, &cond, &v, &a).unwrap();
            assert!(dh.value().data().iter().all(|&z| z == 0.0));
            let out = apply_repair(&xv, &dh, &g).unwrap();
            assert_eq!(out.value().data(), x.data());
        }
        for id in [a.up, a.w_gamma, a.w_beta] {
            *s.get_mut(id) = rng.normal_tensor(s.get(id).shape(), 1.0);
        }
        *s.get_mut(a.alpha) = Tensor::scalar(0.0);
        let t = Tape::new();
        let v = s.bind(&t, false);
        let xv = t.constant(x.clone());
        let cond = t.constant(rng.normal_tensor(&[8, 8], 1.0));
        let dh = film_correction(&xv, &cond, &v, &a).unwrap();
        assert!(dh.value().data().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn empty_context_list_is_a_config_error() {
        let (s, _, a) = setup(4);
        let t = Tape::new();
        let v = s.bind(&t, false);
        let x = t.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(build_conditioning(&x, &[], &v, &a), Err(Error::Config { .. })));
    }

    #[test]
    fn repair_touches_only_gated_rows() {
        let layout = SequenceLayout::new(0, 2, 1, 1, 1).unwrap();
        let g = layout.build_gate().unwrap();
        let t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap());
        let d = t.constant(Tensor::from_rows(&[vec![10.0], vec![10.0], vec![10.0], vec![0.5]]).unwrap());
        let out = apply_repair(&x, &d, &g).unwrap();
        assert_eq!(out.value().data(), &[1.0, 2.0, 3.0, 4.5]);
    }
}
