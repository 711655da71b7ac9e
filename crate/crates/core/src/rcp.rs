//! The trainable plug-in (pruning stages, context encoder, repair adapters)
//! and the hooks that attach it to a backbone forward pass.

use crate::adapter::{
    apply_repair, build_conditioning, encode_context, film_correction, AdapterConfig, AdapterParams, ContextParams,
    RepairContext,
};
use crate::backbone::{aggregate_vision_attention, Backbone, BackboneConfig, BoundBackbone, ForwardMode, ForwardOutput, Hooks, PassState};
use crate::error::{Error, Result};
use crate::layout::{RegionGate, SequenceLayout};
use crate::objectives::RepairKind;
use crate::params::{Bound, ParamStore};
use crate::pruner::{
    combine_logits, condition_queries, cross_attention_score, draw_query_dropout, intrinsic_score, sample_mask_train,
    threshold_mask_infer, token_score, topk_budget, topk_mask, CumulativeMask, PrunerConfig, PrunerParams,
};
use crate::rng::{Purpose, Rng};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Pruner trained with task and sparsity losses only.
    PrunerOnly,
    /// No adapter; the repair loss still trains the pruner.
    NoAdapter,
    /// Adapter present but the repair loss weight is zero.
    NoRepairLoss,
    MeanOnlyRepair,
    /// Learned scoring replaced by top-K on intrinsic attention.
    TopK,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::PrunerOnly,
        Variant::NoAdapter,
        Variant::NoRepairLoss,
        Variant::MeanOnlyRepair,
        Variant::TopK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::PrunerOnly => "pruner-only",
            Variant::NoAdapter => "no-adapter",
            Variant::NoRepairLoss => "no-repair-loss",
            Variant::MeanOnlyRepair => "mean-only-repair",
            Variant::TopK => "topk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant {s:?}")))
    }

    pub fn has_adapter(self) -> bool {
        !matches!(self, Variant::PrunerOnly | Variant::NoAdapter)
    }

    pub fn learned_pruner(self) -> bool {
        self != Variant::TopK
    }

    /// Whether the repair term contributes to the optimized loss.
    pub fn repair_active(self) -> bool {
        !matches!(self, Variant::PrunerOnly | Variant::NoRepairLoss)
    }

    pub fn repair_kind(self) -> RepairKind {
        if self == Variant::MeanOnlyRepair {
            RepairKind::MeanOnly
        } else {
            RepairKind::MeanAndStd
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Maps reference placements on a 32-layer decoder onto `n_layers` by `floor(ℓ·n/32)`.
pub fn scale_placements(reference: &[usize], n_layers: usize) -> Vec<usize> {
    let mut out: Vec<usize> = reference.iter().map(|&l| l * n_layers / 32).collect();
    out.dedup();
    out
}

/// Default pruning layers: `{2, 14, 26}` for the tightest budget, `{5, 15, 25}` otherwise.
pub fn default_pruner_layers(n_layers: usize, target: f64) -> Vec<usize> {
    if target <= 0.15 {
        scale_placements(&[2, 14, 26], n_layers)
    } else {
        scale_placements(&[5, 15, 25], n_layers)
    }
}

/// Default repair layers, scaled from `{23, 30}`.
pub fn default_adapter_layers(n_layers: usize) -> Vec<usize> {
    scale_placements(&[23, 30], n_layers)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RcpConfig {
    pub pruner_layers: Vec<usize>,
    /// Layers after which a repair adapter runs; also the layers the repair loss reads.
    pub adapter_layers: Vec<usize>,
    pub pruner: PrunerConfig,
    pub adapter: AdapterConfig,
    pub variant: Variant,
}

impl RcpConfig {
    pub fn for_backbone(bb: &BackboneConfig, target: f64, variant: Variant) -> Self {
        Self {
            pruner_layers: default_pruner_layers(bb.n_layers, target),
            adapter_layers: default_adapter_layers(bb.n_layers),
            pruner: PrunerConfig::for_width(bb.d_model),
            adapter: AdapterConfig::for_width(bb.d_model),
            variant,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        self.pruner.validate()?;
        self.adapter.validate()?;
        for (key, list) in [("pruner_layers", &self.pruner_layers), ("adapter_layers", &self.adapter_layers)] {
            if list.is_empty() {
                return Err(Error::config(key, "must list at least one layer"));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config(key, "layers must be strictly increasing"));
            }
            if let Some(&l) = list.iter().find(|&&l| l >= n_layers) {
                return Err(Error::config(key, format!("layer {l} exceeds n_layers = {n_layers}")));
            }
        }
        if self.adapter_layers[0] < self.pruner_layers[0] {
            return Err(Error::config(
                "adapter_layers",
                "repair adapter has no preceding pruning stage",
            ));
        }
        Ok(())
    }
}

/// Trainable plug-in parameters.
#[derive(Clone, Debug)]
pub struct RcpModel {
    cfg: RcpConfig,
    d_model: usize,
    n_layers: usize,
    store: ParamStore,
    stages: Vec<PrunerParams>,
    context: Option<ContextParams>,
    adapters: Vec<AdapterParams>,
}

impl RcpModel {
    pub fn new(cfg: RcpConfig, bb: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate(bb.n_layers)?;
        let d = bb.d_model;
        let mut rng = Rng::new(seed).substream(Purpose::Init, 1, 0);
        let mut store = ParamStore::new();
        let stages = if cfg.variant.learned_pruner() {
            cfg.pruner_layers
                .iter()
                .map(|l| PrunerParams::init(&mut store, &format!("pruner{l}"), d, &cfg.pruner, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let (context, adapters) = if cfg.variant.has_adapter() {
            let c = ContextParams::init(&mut store, "context", d, &mut rng);
            let a = cfg
                .adapter_layers
                .iter()
                .map(|l| AdapterParams::init(&mut store, &format!("adapter{l}"), d, &cfg.adapter, &mut rng))
                .collect();
            (Some(c), a)
        } else {
            (None, Vec::new())
        };
        Ok(Self {
            cfg,
            d_model: d,
            n_layers: bb.n_layers,
            store,
            stages,
            context,
            adapters,
        })
    }

    /// Rebuilds the plug-in around stored parameters, checking names and shapes.
    pub fn from_store(cfg: RcpConfig, bb: &BackboneConfig, store: ParamStore) -> Result<Self> {
        let mut fresh = Self::new(cfg, bb, 0)?;
        if fresh.store.names() != store.names() {
            return Err(Error::Format("plug-in parameter names do not match the configuration".into()));
        }
        for (a, b) in fresh.store.tensors().iter().zip(store.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::shape("plug-in checkpoint", a.shape(), b.shape()));
            }
        }
        fresh.store = store;
        Ok(fresh)
    }

    pub fn config(&self) -> &RcpConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn stages(&self) -> &[PrunerParams] {
        &self.stages
    }

    pub fn adapters(&self) -> &[AdapterParams] {
        &self.adapters
    }

    pub fn context(&self) -> Option<&ContextParams> {
        self.context.as_ref()
    }
}

/// Training draws stochastic masks; inference thresholds logits at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Phase {
    Train { tau: f64 },
    Infer,
}

/// Per-pass randomness and budget settings.
#[derive(Clone, Debug)]
pub struct PassSettings {
    pub phase: Phase,
    pub rng: Rng,
    /// Index of this pass among all stochastic passes of the run.
    pub draw: u64,
    /// Target used by the top-K variant.
    pub r_star: f64,
}

impl PassSettings {
    pub fn infer(r_star: f64) -> Self {
        Self {
            phase: Phase::Infer,
            rng: Rng::new(0),
            draw: 0,
            r_star,
        }
    }
}

/// Pruning and repair hooks for one student pass.
pub struct RcpHooks<'m, 't> {
    model: &'m RcpModel,
    vars: Bound<'t>,
    layout: SequenceLayout,
    settings: PassSettings,
    gate: RegionGate,
    p_v: Tensor,
    topk_keep: usize,
    mask: CumulativeMask,
    m_var: Option<Var<'t>>,
    stage_masks: Vec<(usize, Var<'t>)>,
    contexts: Vec<RepairContext<'t>>,
    logits: Vec<(usize, Tensor)>,
}

/// Result of a student pass.
pub struct StudentPass<'t> {
    pub out: ForwardOutput<'t>,
    pub mask: CumulativeMask,
    /// Differentiable cumulative mask after each stage.
    pub stage_masks: Vec<(usize, Var<'t>)>,
    /// Retention logits of each learned stage.
    pub logits: Vec<(usize, Tensor)>,
}

impl<'m, 't> RcpHooks<'m, 't> {
    pub fn new(model: &'m RcpModel, backbone: &Backbone, vars: Bound<'t>, layout: &SequenceLayout, settings: PassSettings) -> Result<Self> {
        let vis: Vec<usize> = layout.vision_span().collect();
        let first = model.cfg.pruner_layers[0];
        Ok(Self {
            model,
            vars,
            layout: *layout,
            gate: layout.build_gate()?,
            p_v: backbone.positions(&vis),
            topk_keep: topk_budget(layout.n_vision, model.n_layers, first, settings.r_star),
            settings,
            mask: CumulativeMask::dense(layout.n_vision),
            m_var: None,
            stage_masks: Vec::new(),
            contexts: Vec::new(),
            logits: Vec::new(),
        })
    }

    /// Vision rows in original order, dead tokens replaced by zero rows.
    fn vision_rows(&self, st: &PassState<'t>) -> Result<Var<'t>> {
        let (rows, d) = {
            let v = st.h.value();
            (v.rows(), v.cols())
        };
        let start = self.layout.n_system;
        let dead = self.mask.dead();
        let idx: Vec<usize> = (0..self.layout.n_vision)
            .map(|v| {
                if dead[v] {
                    Ok(rows)
                } else {
                    st.positions
                        .binary_search(&(start + v))
                        .map_err(|_| Error::config("positions", "live vision row missing"))
                }
            })
            .collect::<Result<_>>()?;
        let zero = st.h.tape().constant(Tensor::zeros(&[1, d]));
        Var::concat_rows(&[st.h, zero])?.gather_rows(&idx)
    }

    fn intrinsic_attention(&self, layer: usize, bb: &BoundBackbone<'_, 't>, st: &PassState<'t>) -> Result<Vec<f64>> {
        let va = if layer == 0 {
            let attn = {
                let h = st.h.value();
                bb.backbone.attention_values(0, &h)?
            };
            aggregate_vision_attention(&attn, &st.positions, &self.layout, self.mask.values())?
        } else {
            let rec = &st.trace.layers[layer - 1];
            aggregate_vision_attention(&rec.attention, &rec.positions, &self.layout, self.mask.values())?
        };
        Ok(va.a)
    }

    fn apply(&self, st: &mut PassState<'t>, m_tilde: &Var<'t>) -> Result<()> {
        let tape = st.h.tape();
        match st.mode {
            ForwardMode::Masked => {
                let n = self.layout.n_vision;
                let mut parts = Vec::new();
                if self.layout.n_system > 0 {
                    parts.push(tape.constant(Tensor::ones(&[1, self.layout.n_system])));
                }
                parts.push(m_tilde.reshape(&[1, n])?);
                let rest = self.layout.total() - self.layout.n_system - n;
                if rest > 0 {
                    parts.push(tape.constant(Tensor::ones(&[1, rest])));
                }
                st.key_mask = Some(Var::concat_cols(&parts)?.reshape(&[self.layout.total()])?);
            }
            ForwardMode::Gathered => {
                let start = self.layout.n_system;
                let dead = self.mask.dead();
                let keep: Vec<usize> = (0..st.positions.len())
                    .filter(|&r| {
                        let p = st.positions[r];
                        !(self.layout.is_vision(p) && dead[p - start])
                    })
                    .collect();
                st.h = st.h.gather_rows(&keep)?;
                st.positions = keep.iter().map(|&r| st.positions[r]).collect();
            }
            ForwardMode::Teacher => {}
        }
        Ok(())
    }

    fn prune(&mut self, k: usize, layer: usize, bb: &BoundBackbone<'_, 't>, st: &mut PassState<'t>) -> Result<()> {
        let tape = st.h.tape();
        let n = self.layout.n_vision;
        let dead = self.mask.dead();
        let prev = self.m_var.unwrap_or_else(|| tape.constant(Tensor::ones(&[n])));
        if dead.iter().all(|&x| x) {
            self.mask.update(layer, &vec![0.0; n])?;
            self.stage_masks.push((layer, prev));
            return Ok(());
        }
        let h_v = self.vision_rows(st)?;
        let a_raw = self.intrinsic_attention(layer, bb, st)?;
        let m = if self.model.cfg.variant.learned_pruner() {
            let p = &self.model.stages[k];
            let vars = &self.vars;
            let x_v = bb.ln1(layer, &h_v)?;
            let q_rows: Vec<usize> = self
                .layout
                .effective_question_span()
                .map(|q| st.positions.binary_search(&q).map_err(|_| Error::config("positions", "question row missing")))
                .collect::<Result<_>>()?;
            let x_q = bb.ln1(layer, &st.h.gather_rows(&q_rows)?)?;
            let qp = condition_queries(&vars[p.qp], &x_q, self.layout.q_effective)?;
            let kv = bb.keys(layer, &x_v)?.matmul(&vars[p.wkp])?;
            let draw = self.settings.draw;
            let dropped = match self.settings.phase {
                Phase::Train { .. } => {
                    let mut r = self.settings.rng.substream(Purpose::QueryDropout, draw, layer as u64);
                    Some(draw_query_dropout(&mut r, self.model.cfg.pruner.n_queries, self.model.cfg.pruner.query_dropout))
                }
                Phase::Infer => None,
            };
            let s_a = cross_attention_score(&qp, &kv, &vars[p.agg], &dead, dropped.as_deref())?;
            let s_t = token_score(&x_v, vars, p)?;
            let a = intrinsic_score(&a_raw, self.mask.values())?;
            let a = tape.constant(tape.freeze(|| a));
            let logits = combine_logits(&a, &s_a, &s_t, &vars[p.bias], &dead)?;
            let lv = logits.value().clone();
            let m = match self.settings.phase {
                Phase::Train { tau } => {
                    let noise = self
                        .settings
                        .rng
                        .substream(Purpose::GumbelNoise, draw, layer as u64)
                        .logistic_noise(&[n]);
                    sample_mask_train(&logits, tau, &noise)?
                }
                Phase::Infer => tape.constant(Tensor::vector(threshold_mask_infer(lv.data(), 1.0)?)),
            };
            self.logits.push((layer, lv));
            m
        } else {
            let alive = dead.iter().filter(|&&d| !d).count();
            tape.constant(Tensor::vector(topk_mask(&a_raw, &dead, self.topk_keep.min(alive))))
        };
        let m_new = prev.mul(&m)?;
        {
            let mv = m.value().data().to_vec();
            self.mask.update(layer, &mv)?;
        }
        if let Some(ctx) = &self.model.context {
            let weights = m.affine(-1.0, 1.0).mul(&prev)?;
            let p_v = tape.constant(self.p_v.clone());
            self.contexts
                .push(encode_context(&self.vars, ctx, &m, &p_v, &h_v, &weights, layer)?);
        }
        self.stage_masks.push((layer, m_new));
        self.m_var = Some(m_new);
        self.apply(st, &m_new)
    }

    pub fn contexts(&self) -> &[RepairContext<'t>] {
        &self.contexts
    }
}

impl<'m, 't> Hooks<'t> for RcpHooks<'m, 't> {
    fn before_layer(&mut self, layer: usize, bb: &BoundBackbone<'_, 't>, st: &mut PassState<'t>) -> Result<()> {
        match self.model.cfg.pruner_layers.iter().position(|&l| l == layer) {
            Some(k) => self.prune(k, layer, bb, st),
            None => Ok(()),
        }
    }

    fn after_layer(&mut self, layer: usize, _bb: &BoundBackbone<'_, 't>, st: &mut PassState<'t>) -> Result<()> {
        let Some(k) = self.model.cfg.adapter_layers.iter().position(|&l| l == layer) else {
            return Ok(());
        };
        let Some(ap) = self.model.adapters.get(k) else {
            return Ok(());
        };
        let g = self.gate.select(&st.positions);
        let cond = build_conditioning(&st.h, &self.contexts, &self.vars, ap)?;
        let dh = film_correction(&st.h, &cond, &self.vars, ap)?;
        st.h = apply_repair(&st.h, &dh, &g)?;
        Ok(())
    }
}

/// Runs one student pass with the plug-in attached.
#[allow(clippy::too_many_arguments)]
pub fn student_forward<'t>(
    model: &RcpModel,
    backbone: &Backbone,
    bb: &BoundBackbone<'_, 't>,
    vars: &Bound<'t>,
    tokens: &[usize],
    layout: &SequenceLayout,
    mode: ForwardMode,
    settings: PassSettings,
) -> Result<StudentPass<'t>> {
    if mode == ForwardMode::Teacher {
        return Err(Error::config("mode", "student passes run masked or gathered"));
    }
    let mut hooks = RcpHooks::new(model, backbone, vars.clone(), layout, settings)?;
    let out = backbone.forward(bb, tokens, layout, mode, &mut hooks)?;
    Ok(StudentPass {
        out,
        mask: hooks.mask,
        stage_masks: hooks.stage_masks,
        logits: hooks.logits,
    })
}
