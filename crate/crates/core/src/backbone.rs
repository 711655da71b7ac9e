//! The frozen toy decoder.
//!
//! Pre-LN blocks: `h += Attn(LN1(h))`, `h += FFN(LN2(h))`, learned absolute
//! positions added once at the input, untied output head. One driver,
//! [`Backbone::forward`], runs all three pass modes and calls [`Hooks`]
//! before each block (pruning) and after each block (repair).

use crate::error::{Error, Result};
use crate::layout::SequenceLayout;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{Purpose, Rng};
use crate::tape::{gelu_scalar, softmax_rows, Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 64,
            max_len: 96,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "d_model",
                format!("{} is not divisible by n_heads = {}", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    store: ParamStore,
    embed: ParamId,
    pos: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head: ParamId,
    head_b: ParamId,
}

/// Which forward pass to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// All tokens, no hooks consulted for key masking.
    Teacher,
    /// Full length; pruned vision keys get zero attention weight.
    Masked,
    /// Pruned vision rows are physically removed.
    Gathered,
}

/// Mutable state of one forward pass, visible to hooks.
pub struct PassState<'t> {
    pub layout: SequenceLayout,
    pub mode: ForwardMode,
    /// Current hidden rows (`rows × d`).
    pub h: Var<'t>,
    /// Original sequence position of each current row, ascending.
    pub positions: Vec<usize>,
    /// Per-row key weights (masked mode only).
    pub key_mask: Option<Var<'t>>,
    pub trace: LayerTrace<'t>,
}

/// One decoder layer's recorded outputs.
#[derive(Clone)]
pub struct LayerRecord<'t> {
    /// Layer output after any post-layer hook (`rows × d`).
    pub hidden: Var<'t>,
    /// Attention weights, `heads × rows × rows`.
    pub attention: Tensor,
    pub positions: Vec<usize>,
}

#[derive(Clone, Default)]
pub struct LayerTrace<'t> {
    pub layers: Vec<LayerRecord<'t>>,
}

impl<'t> LayerTrace<'t> {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Hidden rows of layer `layer` at the given original positions.
    pub fn rows_at(&self, layer: usize, wanted: &[usize]) -> Result<Var<'t>> {
        let rec = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::config("layer", format!("{layer} out of range")))?;
        let idx: Vec<usize> = wanted
            .iter()
            .map(|p| {
                rec.positions
                    .binary_search(p)
                    .map_err(|_| Error::config("positions", format!("position {p} absent at layer {layer}")))
            })
            .collect::<Result<_>>()?;
        rec.hidden.gather_rows(&idx)
    }
}

/// Plug-in points of the forward driver.
pub trait Hooks<'t> {
    /// Runs before block `layer`'s attention.
    fn before_layer(&mut self, _layer: usize, _bb: &BoundBackbone<'_, 't>, _st: &mut PassState<'t>) -> Result<()> {
        Ok(())
    }
    /// Runs after block `layer`; the trace record is written afterwards.
    fn after_layer(&mut self, _layer: usize, _bb: &BoundBackbone<'_, 't>, _st: &mut PassState<'t>) -> Result<()> {
        Ok(())
    }
}

/// No-op hooks.
pub struct NoHooks;
impl<'t> Hooks<'t> for NoHooks {}

#[derive(Clone)]
pub struct ForwardOutput<'t> {
    /// `rows × vocab` logits over the final rows.
    pub logits: Var<'t>,
    pub positions: Vec<usize>,
    pub trace: LayerTrace<'t>,
}

impl<'t> ForwardOutput<'t> {
    /// Logit rows at the answer positions.
    pub fn answer_logits(&self, layout: &SequenceLayout) -> Result<Var<'t>> {
        let idx: Vec<usize> = layout
            .answer_span()
            .map(|p| self.positions.binary_search(&p).expect("answer rows are never pruned"))
            .collect();
        self.logits.gather_rows(&idx)
    }
}

/// Backbone parameters bound to a tape.
pub struct BoundBackbone<'b, 't> {
    pub backbone: &'b Backbone,
    vars: Bound<'t>,
}

fn ln_values(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = vec![0.0; x.numel()];
    for i in 0..x.numel() / c {
        let row = &x.data()[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..c {
            out[i * c + j] = (row[j] - mean) * rs * g.data()[j] + b.data()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed).substream(Purpose::Init, 0, 0);
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut s = ParamStore::new();
        let embed = s.add("embed", rng.normal_tensor(&[v, d], 1.0));
        let pos = s.add("pos", rng.normal_tensor(&[cfg.max_len, d], 0.3));
        let proj_std = 1.0 / (d as f64).sqrt();
        let out_std = proj_std / (2.0 * cfg.n_layers as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |n: &str| format!("layer{l}.{n}");
            layers.push(LayerIds {
                ln1_g: s.add(p("ln1_g"), Tensor::ones(&[d])),
                ln1_b: s.add(p("ln1_b"), Tensor::zeros(&[d])),
                wq: s.add(p("wq"), rng.normal_tensor(&[d, d], proj_std)),
                wk: s.add(p("wk"), rng.normal_tensor(&[d, d], proj_std)),
                wv: s.add(p("wv"), rng.normal_tensor(&[d, d], proj_std)),
                wo: s.add(p("wo"), rng.normal_tensor(&[d, d], out_std)),
                ln2_g: s.add(p("ln2_g"), Tensor::ones(&[d])),
                ln2_b: s.add(p("ln2_b"), Tensor::zeros(&[d])),
                w1: s.add(p("w1"), rng.normal_tensor(&[d, f], proj_std)),
                b1: s.add(p("b1"), Tensor::zeros(&[f])),
                w2: s.add(p("w2"), rng.normal_tensor(&[f, d], 1.0 / (f as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt())),
                b2: s.add(p("b2"), Tensor::zeros(&[d])),
            });
        }
        let lnf_g = s.add("lnf_g", Tensor::ones(&[d]));
        let lnf_b = s.add("lnf_b", Tensor::zeros(&[d]));
        let head = s.add("head", rng.normal_tensor(&[d, v], proj_std));
        let head_b = s.add("head_b", Tensor::zeros(&[v]));
        Ok(Self {
            cfg,
            store: s,
            embed,
            pos,
            layers,
            lnf_g,
            lnf_b,
            head,
            head_b,
        })
    }

    /// Rebuilds a backbone around stored parameters, checking names and shapes.
    pub fn from_store(cfg: BackboneConfig, store: ParamStore) -> Result<Self> {
        let mut fresh = Self::new(cfg, 0)?;
        if fresh.store.names() != store.names() {
            return Err(Error::Format("backbone parameter names do not match the configuration".into()));
        }
        for (a, b) in fresh.store.tensors().iter().zip(store.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::shape("backbone checkpoint", a.shape(), b.shape()));
            }
        }
        fresh.store = store;
        Ok(fresh)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn digest(&self) -> [u8; 32] {
        self.store.digest()
    }

    /// Positional table rows for the given positions.
    pub fn positions(&self, pos: &[usize]) -> Tensor {
        self.store.get(self.pos).gather_rows(pos)
    }

    pub fn bind<'b, 't>(&'b self, tape: &'t Tape, trainable: bool) -> BoundBackbone<'b, 't> {
        BoundBackbone {
            backbone: self,
            vars: self.store.bind(tape, trainable),
        }
    }

    /// Attention weights of block `layer` for a dense input, computed on plain values.
    pub fn attention_values(&self, layer: usize, h: &Tensor) -> Result<Tensor> {
        let ids = self.layers.get(layer).ok_or_else(|| Error::config("layer", format!("{layer} out of range")))?;
        let s = &self.store;
        let x = ln_values(h, s.get(ids.ln1_g), s.get(ids.ln1_b));
        let q = x.matmul(s.get(ids.wq))?;
        let k = x.matmul(s.get(ids.wk))?;
        let n = h.rows();
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Vec::with_capacity(self.cfg.n_heads * n * n);
        for head in 0..self.cfg.n_heads {
            let mut scores = vec![f64::NEG_INFINITY; n * n];
            for i in 0..n {
                for j in 0..=i {
                    let mut acc = 0.0;
                    for c in head * dh..(head + 1) * dh {
                        acc += q.at(i, c) * k.at(j, c);
                    }
                    scores[i * n + j] = acc * scale;
                }
            }
            out.extend(softmax_rows(&Tensor::matrix(n, n, scores)?)?.into_data());
        }
        Tensor::new(vec![self.cfg.n_heads, n, n], out)
    }

    /// Runs the decoder over `tokens` (one full sequence in layout order).
    pub fn forward<'t>(
        &self,
        bb: &BoundBackbone<'_, 't>,
        tokens: &[usize],
        layout: &SequenceLayout,
        mode: ForwardMode,
        hooks: &mut dyn Hooks<'t>,
    ) -> Result<ForwardOutput<'t>> {
        let l = layout.total();
        if tokens.len() != l {
            return Err(Error::shape("forward tokens", &[tokens.len()], &[l]));
        }
        if l > self.cfg.max_len {
            return Err(Error::config("max_len", format!("sequence of {l} exceeds {}", self.cfg.max_len)));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::config("vocab_size", format!("token id {t} out of range")));
        }
        let positions: Vec<usize> = (0..l).collect();
        let h = bb.vars[self.embed]
            .gather_rows(tokens)?
            .add(&bb.vars[self.pos].gather_rows(&positions)?)?;
        let mut st = PassState {
            layout: *layout,
            mode,
            h,
            positions,
            key_mask: None,
            trace: LayerTrace::default(),
        };
        for layer in 0..self.cfg.n_layers {
            if mode != ForwardMode::Teacher {
                hooks.before_layer(layer, bb, &mut st)?;
            }
            let (h, attention) = bb.block(layer, st.h, st.key_mask.as_ref())?;
            st.h = h;
            if mode != ForwardMode::Teacher {
                hooks.after_layer(layer, bb, &mut st)?;
            }
            st.trace.layers.push(LayerRecord {
                hidden: st.h,
                attention,
                positions: st.positions.clone(),
            });
        }
        let logits = st
            .h
            .layer_norm(&bb.vars[self.lnf_g], &bb.vars[self.lnf_b], LN_EPS)?
            .matmul(&bb.vars[self.head])?
            .add_row(&bb.vars[self.head_b])?;
        Ok(ForwardOutput {
            logits,
            positions: st.positions,
            trace: st.trace,
        })
    }
}

impl<'b, 't> BoundBackbone<'b, 't> {
    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.cfg
    }

    /// Pre-attention normalization of block `layer`.
    pub fn ln1(&self, layer: usize, h: &Var<'t>) -> Result<Var<'t>> {
        let ids = &self.backbone.layers[layer];
        h.layer_norm(&self.vars[ids.ln1_g], &self.vars[ids.ln1_b], LN_EPS)
    }

    /// Key projection of block `layer` applied to already-normalized rows.
    pub fn keys(&self, layer: usize, x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul(&self.vars[self.backbone.layers[layer].wk])
    }

    /// One pre-LN block. Returns the new hidden rows and the attention weights.
    pub fn block(&self, layer: usize, h: Var<'t>, key_mask: Option<&Var<'t>>) -> Result<(Var<'t>, Tensor)> {
        let cfg = &self.backbone.cfg;
        let ids = &self.backbone.layers[layer];
        let v = &self.vars;
        let x = self.ln1(layer, &h)?;
        let q = x.matmul(&v[ids.wq])?;
        let k = x.matmul(&v[ids.wk])?;
        let val = x.matmul(&v[ids.wv])?;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let n = h.value().rows();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut attn = Vec::with_capacity(cfg.n_heads * n * n);
        for head in 0..cfg.n_heads {
            let (a, b) = (head * dh, (head + 1) * dh);
            let qh = q.slice_cols(a, b)?;
            let kh = k.slice_cols(a, b)?;
            let vh = val.slice_cols(a, b)?;
            let w = qh.matmul(&kh.transpose())?.scale(scale).causal_softmax(key_mask)?;
            attn.extend_from_slice(w.value().data());
            heads.push(w.matmul(&vh)?);
        }
        let o = Var::concat_cols(&heads)?.matmul(&v[ids.wo])?;
        let h = h.add(&o)?;
        let f = h
            .layer_norm(&v[ids.ln2_g], &v[ids.ln2_b], LN_EPS)?
            .matmul(&v[ids.w1])?
            .add_row(&v[ids.b1])?
            .gelu()
            .matmul(&v[ids.w2])?
            .add_row(&v[ids.b2])?;
        let h = h.add(&f)?;
        Ok((h, Tensor::new(vec![cfg.n_heads, n, n], attn)?))
    }

    pub fn vars(&self) -> &Bound<'t> {
        &self.vars
    }
}

/// Intrinsic question→vision attention per vision token.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionAttention {
    /// `a_i` in original vision order; 0 for tokens absent from the rows.
    pub a: Vec<f64>,
    /// True for tokens whose cumulative mask is already 0.
    pub pruned: Vec<bool>,
}

/// Mean over heads and effective question rows of the question→vision block.
pub fn aggregate_vision_attention(
    attention: &Tensor,
    positions: &[usize],
    layout: &SequenceLayout,
    cumulative_mask: &[f64],
) -> Result<VisionAttention> {
    if cumulative_mask.len() != layout.n_vision {
        return Err(Error::shape("aggregate_vision_attention", &[cumulative_mask.len()], &[layout.n_vision]));
    }
    let n = positions.len();
    if attention.rank() != 3 || attention.shape()[1] != n || attention.shape()[2] != n {
        return Err(Error::shape("aggregate_vision_attention", attention.shape(), &[0, n, n]));
    }
    let heads = attention.shape()[0];
    let vis = layout.vision_span();
    let q_rows: Vec<usize> = layout
        .effective_question_span()
        .map(|p| positions.binary_search(&p).map_err(|_| Error::config("positions", "question row missing")))
        .collect::<Result<_>>()?;
    let mut a = vec![0.0; layout.n_vision];
    for (col, &p) in positions.iter().enumerate() {
        if !vis.contains(&p) {
            continue;
        }
        let mut s = 0.0;
        for h in 0..heads {
            for &r in &q_rows {
                s += attention.data()[(h * n + r) * n + col];
            }
        }
        a[p - vis.start] = s / (heads * q_rows.len()) as f64;
    }
    Ok(VisionAttention {
        a,
        pruned: cumulative_mask.iter().map(|&m| m < 0.5).collect(),
    })
}

/// Reference single-head attention used by tests: `softmax(QKᵀ/√d)V` with a causal mask.
#[doc(hidden)]
pub fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (n, d) = (q.rows(), q.cols());
    let mut out = vec![0.0; n * v.cols()];
    for i in 0..n {
        let scores: Vec<f64> = (0..=i)
            .map(|j| (0..d).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for (j, s) in scores.iter().enumerate() {
            let w = (s - m).exp() / z;
            for c in 0..v.cols() {
                out[i * v.cols() + c] += w * v.at(j, c);
            }
        }
    }
    Tensor::matrix(n, v.cols(), out).unwrap()
}

#[doc(hidden)]
pub fn gelu_values(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_len: 16,
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = BackboneConfig {
            n_heads: 3,
            ..tiny()
        };
        let err = Backbone::new(cfg, 1).unwrap_err().to_string();
        assert!(err.contains("d_model"), "{err}");
    }

    #[test]
    fn hand_checked_single_layer() {
        // one layer, one head, d=2; identity projections, zero FFN.
        let cfg = BackboneConfig {
            n_layers: 1,
            d_model: 2,
            n_heads: 1,
            d_ff: 2,
            vocab_size: 3,
            max_len: 3,
        };
        let mut bb = Backbone::new(cfg, 0).unwrap();
        let s = bb.store_mut();
        let set = |s: &mut ParamStore, name: &str, t: Tensor| {
            let id = s.find(name).unwrap();
            *s.get_mut(id) = t;
        };
        set(s, "embed", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 1.0]]).unwrap());
        set(s, "pos", Tensor::zeros(&[3, 2]));
        for w in ["wq", "wk", "wv", "wo"] {
            set(s, &format!("layer0.{w}"), Tensor::identity(2));
        }
        set(s, "layer0.w1", Tensor::zeros(&[2, 2]));
        set(s, "layer0.w2", Tensor::zeros(&[2, 2]));
        let layout = SequenceLayout::new(1, 1, 1, 1, 0).unwrap();
        let tape = Tape::new();
        let bound = bb.bind(&tape, false);
        let out = bb.forward(&bound, &[0, 1, 2], &layout, ForwardMode::Teacher, &mut NoHooks).unwrap();
        let got = out.trace.layers[0].hidden.value().clone();

        // by hand: LN of 2-vectors maps (a,b) to ±1 signs (eps-shrunk), identity projections.
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 1.0]]).unwrap();
        let x = ln_values(&e, &Tensor::ones(&[2]), &Tensor::zeros(&[2]));
        let att = naive_attention(&x, &x, &x);
        let want = e.zip_map(&att, "t", |a, b| a + b).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-12, "{got:?} vs {want:?}");
    }

    #[test]
    fn causal_rows_never_look_ahead() {
        let bb = Backbone::new(tiny(), 3).unwrap();
        let mut rng = Rng::new(1);
        let h = rng.normal_tensor(&[6, 8], 1.0);
        let a = bb.attention_values(0, &h).unwrap();
        for head in 0..2 {
            for i in 0..6 {
                let row = &a.data()[(head * 6 + i) * 6..(head * 6 + i + 1) * 6];
                assert!(row[i + 1..].iter().all(|&w| w == 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_uniform_and_linear() {
        let layout = SequenceLayout::new(1, 4, 2, 2, 1).unwrap();
        let positions: Vec<usize> = (0..8).collect();
        let uni = Tensor::full(&[2, 8, 8], 1.0 / 8.0);
        let va = aggregate_vision_attention(&uni, &positions, &layout, &[1.0; 4]).unwrap();
        assert!(va.a.iter().all(|&x| (x - 0.125).abs() < 1e-15));

        let mut t = vec![0.0; 2 * 64];
        let p = [0.1, 0.2, 0.3, 0.4];
        let q = [0.4, 0.1, 0.1, 0.2];
        for r in 5..7 {
            for v in 0..4 {
                t[r * 8 + 1 + v] = p[v];
                t[(8 + r) * 8 + 1 + v] = q[v];
            }
        }
        let va = aggregate_vision_attention(&Tensor::new(vec![2, 8, 8], t).unwrap(), &positions, &layout, &[1.0, 0.0, 1.0, 1.0]).unwrap();
        for v in 0..4 {
            assert!((va.a[v] - (p[v] + q[v]) / 2.0).abs() < 1e-15);
        }
        assert_eq!(va.pruned, vec![false, true, false, false]);
    }

    #[test]
    fn aggregation_matches_triple_loop() {
        let layout = SequenceLayout::new(2, 5, 3, 2, 1).unwrap();
        let n = layout.total();
        let positions: Vec<usize> = (0..n).collect();
        let mut rng = Rng::new(8);
        let attn = rng.normal_tensor(&[3, n, n], 1.0);
        let va = aggregate_vision_attention(&attn, &positions, &layout, &[1.0; 5]).unwrap();
        for v in 0..5 {
            let mut s = 0.0;
            for h in 0..3 {
                for q in 7..9 {
                    s += attn.data()[(h * n + q) * n + 2 + v];
                }
            }
            assert!((va.a[v] - s / 6.0).abs() < 1e-14);
        }
    }
}
