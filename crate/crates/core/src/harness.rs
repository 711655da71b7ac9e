//! Synthetic lookup task, backbone pre-training, plug-in training and evaluation.
//!
//! Each example shows a grid of patch tokens. `k_informative` patches are
//! objects carrying a type and a value; the rest are noise. Every type draws one
//! value per example, so all objects of a type agree and several patches may
//! carry the same answer. The question names a type and the answer is that
//! type's value, then `EOS`. Answers are scored under teacher forcing; because the decoder is
//! causal and the only free answer token is the first one, "every answer
//! argmax is correct" is the same event as a greedy exact match.

use crate::backbone::{Backbone, BackboneConfig, ForwardMode, NoHooks};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::layout::SequenceLayout;
use crate::objectives::{average_retention, average_retention_var, repair_loss, sparsity_loss, total_loss, w2sq_values, LossWeights, Schedules};
use crate::optim::Adam;
use crate::params::Bound;
use crate::pruner::CumulativeMask;
use crate::rcp::{student_forward, PassSettings, Phase, RcpModel};
use crate::rng::{Purpose, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BOS: usize = 0;
pub const PAD: usize = 1;
pub const FILL: usize = 2;
pub const ANS: usize = 3;
pub const EOS: usize = 4;
const N_SPECIAL: usize = 5;

/// Which generated split an example belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Pretrain = 0,
    Train = 1,
    Eval = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub n_system: usize,
    pub n_vision: usize,
    pub n_question: usize,
    pub n_answer: usize,
    pub n_types: usize,
    pub n_values: usize,
    pub n_noise: usize,
    pub k_informative: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_system: 1,
            n_vision: 36,
            n_question: 2,
            n_answer: 2,
            n_types: 3,
            n_values: 6,
            n_noise: 8,
            k_informative: 9,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_vision", self.n_vision),
            ("n_question", self.n_question),
            ("n_answer", self.n_answer),
            ("n_types", self.n_types),
            ("n_values", self.n_values),
            ("n_noise", self.n_noise),
            ("k_informative", self.k_informative),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.k_informative > self.n_vision {
            return Err(Error::config("k_informative", format!("exceeds n_vision = {}", self.n_vision)));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        N_SPECIAL + self.n_types + self.n_noise + self.n_types * self.n_values + self.n_values
    }

    pub fn seq_len(&self) -> usize {
        self.n_system + self.n_vision + self.n_question + self.n_answer
    }

    pub fn question_token(&self, t: usize) -> usize {
        N_SPECIAL + t
    }

    pub fn noise_token(&self, k: usize) -> usize {
        N_SPECIAL + self.n_types + k
    }

    pub fn object_token(&self, t: usize, v: usize) -> usize {
        N_SPECIAL + self.n_types + self.n_noise + t * self.n_values + v
    }

    pub fn value_token(&self, v: usize) -> usize {
        N_SPECIAL + self.n_types + self.n_noise + self.n_types * self.n_values + v
    }

    /// Backbone sized for this task.
    pub fn backbone_config(&self, n_layers: usize, d_model: usize, n_heads: usize, d_ff: usize) -> BackboneConfig {
        BackboneConfig {
            n_layers,
            d_model,
            n_heads,
            d_ff,
            vocab_size: self.vocab_size(),
            max_len: self.seq_len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticExample {
    pub tokens: Vec<usize>,
    pub layout: SequenceLayout,
    /// Next-token targets for the answer rows.
    pub targets: Vec<usize>,
    /// Vision indices of object patches.
    pub informative: Vec<usize>,
    pub query_type: usize,
    pub answer_value: usize,
}

/// Reads the answer off the vision tokens: value of the first object of the queried type.
pub fn oracle_answer(task: &TaskConfig, vision: &[usize], query_type: usize) -> Option<usize> {
    let lo = task.object_token(0, 0);
    vision.iter().find_map(|&tok| {
        if tok < lo || tok >= lo + task.n_types * task.n_values {
            return None;
        }
        let k = tok - lo;
        (k / task.n_values == query_type).then_some(k % task.n_values)
    })
}

/// Example `index` of `split`; a pure function of `(seed, split, index)`.
pub fn generate_example(task: &TaskConfig, seed: u64, split: Split, index: u64) -> Result<SyntheticExample> {
    task.validate()?;
    let mut rng = Rng::new(seed).substream(Purpose::Data, index, split as u64);
    let n = task.n_vision;
    let informative = {
        let mut pos = rng.choose_distinct(n, task.k_informative);
        pos.sort_unstable();
        pos
    };
    let mut types: Vec<usize> = (0..task.n_types).collect();
    rng.shuffle(&mut types);
    let values: Vec<usize> = (0..task.n_types).map(|_| rng.below(task.n_values)).collect();
    let mut vision: Vec<usize> = (0..n).map(|_| task.noise_token(rng.below(task.n_noise))).collect();
    let mut present = Vec::new();
    for (k, &p) in informative.iter().enumerate() {
        let t = if k < task.n_types { types[k] } else { rng.below(task.n_types) };
        vision[p] = task.object_token(t, values[t]);
        if !present.contains(&t) {
            present.push(t);
        }
    }
    present.sort_unstable();
    let query_type = present[rng.below(present.len())];
    let answer_value = oracle_answer(task, &vision, query_type).expect("queried type is present");
    let q_effective = 1 + rng.below(task.n_question);
    let layout = SequenceLayout::new(task.n_system, n, task.n_question, q_effective, task.n_answer)?;

    let mut tokens = Vec::with_capacity(task.seq_len());
    tokens.extend((0..task.n_system).map(|i| if i == 0 { BOS } else { FILL }));
    tokens.extend_from_slice(&vision);
    tokens.push(task.question_token(query_type));
    tokens.extend((1..task.n_question).map(|i| if i < q_effective { FILL } else { PAD }));
    let value = task.value_token(answer_value);
    let mut targets = Vec::with_capacity(task.n_answer);
    for i in 0..task.n_answer {
        tokens.push(match i {
            0 => ANS,
            1 => value,
            _ => EOS,
        });
        targets.push(if i == 0 { value } else { EOS });
    }
    Ok(SyntheticExample {
        tokens,
        layout,
        targets,
        informative,
        query_type,
        answer_value,
    })
}

/// Examples `start..start + count` of a split.
pub fn generate_batch(task: &TaskConfig, seed: u64, split: Split, start: u64, count: usize) -> Result<Vec<SyntheticExample>> {
    (0..count as u64).map(|i| generate_example(task, seed, split, start + i)).collect()
}

/// Argmax per row (lowest index on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 24,
            lr: 3e-3,
            seed: 1,
        }
    }
}

/// Supervised full-token training of a fresh backbone. Returns the backbone
/// and the per-step mean cross-entropy.
pub fn pretrain(
    cfg: &BackboneConfig,
    task: &TaskConfig,
    pc: &PretrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(Backbone, Vec<f64>)> {
    let mut bb = Backbone::new(cfg.clone(), pc.seed)?;
    let sched = Schedules::new(pc.steps, 1.0, pc.lr);
    let mut opt = Adam::new(bb.store());
    let mut losses = Vec::with_capacity(pc.steps);
    for step in 0..pc.steps {
        let batch = generate_batch(task, pc.seed, Split::Pretrain, (step * pc.batch_size) as u64, pc.batch_size)?;
        let tape = Tape::new();
        let bound = bb.bind(&tape, true);
        let mut total: Option<Var<'_>> = None;
        for ex in &batch {
            let out = bb.forward(&bound, &ex.tokens, &ex.layout, ForwardMode::Teacher, &mut NoHooks)?;
            let ce = out.answer_logits(&ex.layout)?.cross_entropy(&ex.targets)?;
            total = Some(match total {
                Some(t) => t.add(&ce)?,
                None => ce,
            });
        }
        let loss = total.expect("non-empty batch").scale(1.0 / pc.batch_size as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("pre-training loss at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = bound.vars().vars().iter().map(|v| grads.wrt(*v)).collect();
        opt.step(bb.store_mut(), &g, sched.lr(step))?;
        losses.push(value);
        progress(step, value);
    }
    Ok((bb, losses))
}

/// Loss components of one batch, all on the same tape.
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub task: Var<'t>,
    pub repair: Var<'t>,
    pub sparse: Var<'t>,
    pub r_bar: Var<'t>,
    pub masks: Vec<CumulativeMask>,
}

/// Per-step knobs of [`batch_loss`].
#[derive(Clone, Debug)]
pub struct LossSettings {
    pub tau: f64,
    pub r_star: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub step: u64,
}

/// Teacher and student passes for every example, then the weighted loss.
pub fn batch_loss<'t>(
    tape: &'t Tape,
    backbone: &Backbone,
    model: &RcpModel,
    vars: &Bound<'t>,
    batch: &[SyntheticExample],
    ls: &LossSettings,
) -> Result<LossParts<'t>> {
    if batch.is_empty() {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let bb = backbone.bind(tape, false);
    let variant = model.config().variant;
    let designated = &model.config().adapter_layers;
    let rng = Rng::new(ls.seed);
    let mut task_sum: Option<Var<'t>> = None;
    let mut repair_sum: Option<Var<'t>> = None;
    let mut r_sum: Option<Var<'t>> = None;
    let mut masks = Vec::with_capacity(batch.len());
    let acc = |s: Option<Var<'t>>, v: Var<'t>| -> Result<Var<'t>> {
        match s {
            Some(s) => s.add(&v),
            None => Ok(v),
        }
    };
    for (i, ex) in batch.iter().enumerate() {
        let teacher = backbone.forward(&bb, &ex.tokens, &ex.layout, ForwardMode::Teacher, &mut NoHooks)?;
        let settings = PassSettings {
            phase: Phase::Train { tau: ls.tau },
            rng: rng.clone(),
            draw: ls.step * batch.len() as u64 + i as u64,
            r_star: ls.r_star,
        };
        let student = student_forward(model, backbone, &bb, vars, &ex.tokens, &ex.layout, ForwardMode::Masked, settings)?;
        let ce = student.out.answer_logits(&ex.layout)?.cross_entropy(&ex.targets)?;
        let ans: Vec<usize> = ex.layout.answer_span().collect();
        let mut rep: Option<Var<'t>> = None;
        for &l in designated {
            let d = repair_loss(
                &student.out.trace.rows_at(l, &ans)?,
                &teacher.trace.rows_at(l, &ans)?,
                variant.repair_kind(),
            )?;
            rep = Some(acc(rep, d)?);
        }
        let rep = rep.expect("at least one designated layer").scale(1.0 / designated.len() as f64);
        let r = average_retention_var(&student.stage_masks, backbone.config().n_layers)?;
        task_sum = Some(acc(task_sum, ce)?);
        repair_sum = Some(acc(repair_sum, rep)?);
        r_sum = Some(acc(r_sum, r)?);
        masks.push(student.mask);
    }
    let inv = 1.0 / batch.len() as f64;
    let task = task_sum.unwrap().scale(inv);
    let repair = repair_sum.unwrap().scale(inv);
    let r_bar = r_sum.unwrap().scale(inv);
    let sparse = sparsity_loss(&r_bar, ls.r_star);
    let mut w = ls.weights;
    if !variant.repair_active() {
        w.repair = 0.0;
    }
    let total = total_loss(&task, &repair, &sparse, &w)?;
    Ok(LossParts {
        total,
        task,
        repair,
        sparse,
        r_bar,
        masks,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub schedules: Schedules,
    pub seed: u64,
    /// Global L2 norm the gradient is rescaled to when it exceeds it; 0 disables clipping.
    pub grad_clip: f64,
}

impl TrainConfig {
    /// One pass over `examples` generated examples.
    pub fn one_epoch(examples: usize, batch_size: usize, target: f64, lr: f64, seed: u64) -> Self {
        let steps = examples.div_ceil(batch_size).max(1);
        Self {
            steps,
            batch_size,
            weights: LossWeights::default(),
            schedules: Schedules::new(steps, target, lr),
            seed,
            grad_clip: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::config("grad_clip", "must be a finite non-negative number"));
        }
        if self.steps != self.schedules.total_steps {
            return Err(Error::config("steps", "schedule length differs from the step count"));
        }
        self.weights.validate()?;
        self.schedules.validate()
    }
}

/// One row of the per-step metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub task_loss: f64,
    pub repair_loss: f64,
    pub sparse_loss: f64,
    pub r_bar: f64,
    pub tau: f64,
    pub r_star: f64,
    pub lr: f64,
    pub total: f64,
    pub update_norm: f64,
}

pub const STEP_CSV_HEADER: &str = "step,task_loss,repair_loss,sparse_loss,r_bar,tau,r_star,lr";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.task_loss, self.repair_loss, self.sparse_loss, self.r_bar, self.tau, self.r_star, self.lr
        )
    }
}

/// Training state: plug-in parameters, optimizer moments and the step counter.
pub struct Trainer<'b> {
    pub backbone: &'b Backbone,
    pub model: RcpModel,
    pub task: TaskConfig,
    pub cfg: TrainConfig,
    opt: Adam,
    step: usize,
    /// Cumulative masks of every training example seen so far.
    pub masks_seen: Vec<CumulativeMask>,
    pub keep_masks: bool,
}

impl<'b> Trainer<'b> {
    pub fn new(backbone: &'b Backbone, model: RcpModel, task: TaskConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        task.validate()?;
        let opt = Adam::new(model.store());
        Ok(Self {
            backbone,
            model,
            task,
            cfg,
            opt,
            step: 0,
            masks_seen: Vec::new(),
            keep_masks: false,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    /// Teacher pass, student pass, weighted loss, backward, Adam on plug-in parameters.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let s = &self.cfg.schedules;
        let (tau, r_star, lr) = (s.tau(step), s.r_star(step), s.lr(step));
        let bs = self.cfg.batch_size;
        let batch = generate_batch(&self.task, self.cfg.seed, Split::Train, (step * bs) as u64, bs)?;
        let ls = LossSettings {
            tau,
            r_star,
            weights: self.cfg.weights,
            seed: self.cfg.seed,
            step: step as u64,
        };
        let tape = Tape::new();
        let vars = self.model.store().bind(&tape, true);
        let parts = batch_loss(&tape, self.backbone, &self.model, &vars, &batch, &ls)?;
        let total = parts.total.item();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {step}: task {} repair {} sparse {}",
                parts.task.item(),
                parts.repair.item(),
                parts.sparse.item()
            )));
        }
        let grads = tape.backward(parts.total)?;
        let mut g: Vec<Tensor> = vars.vars().iter().map(|v| grads.wrt(*v)).collect();
        let grad_norm = g.iter().map(|t| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if self.cfg.grad_clip > 0.0 && grad_norm > self.cfg.grad_clip {
            let k = self.cfg.grad_clip / grad_norm;
            g = g.into_iter().map(|t| t.map(|x| x * k)).collect();
        }
        let update_norm = self.opt.step(self.model.store_mut(), &g, lr)?;
        if self.keep_masks {
            self.masks_seen.extend(parts.masks);
        }
        self.step += 1;
        Ok(StepMetrics {
            step,
            task_loss: parts.task.item(),
            repair_loss: parts.repair.item(),
            sparse_loss: parts.sparse.item(),
            r_bar: parts.r_bar.item(),
            tau,
            r_star,
            lr,
            total,
            update_norm,
        })
    }

    /// Runs the remaining steps.
    pub fn run(&mut self, mut progress: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::with_capacity(self.cfg.steps - self.step.min(self.cfg.steps));
        while !self.done() {
            let m = self.train_step()?;
            progress(&m);
            log.push(m);
        }
        Ok(log)
    }

    pub fn model(&self) -> &RcpModel {
        &self.model
    }

    pub fn into_model(self) -> RcpModel {
        self.model
    }
}

/// Outcome of [`evaluate`].
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub accuracy: f64,
    pub predictions: Vec<Vec<usize>>,
    pub correct: Vec<bool>,
    /// Retained vision tokens averaged over layers and examples.
    pub avg_tokens: f64,
    /// Mean retention per decoder layer.
    pub per_layer_retention: Vec<f64>,
    pub r_bar: f64,
    pub masks: Vec<CumulativeMask>,
    /// Mean per-example repair distance at the designated layers.
    pub repair_loss: f64,
    /// Pooled W2² between student and teacher answer rows, per layer.
    pub drift: Vec<f64>,
}

/// Greedy exact-match evaluation. With `model = None` the full backbone is scored.
pub fn evaluate(backbone: &Backbone, model: Option<&RcpModel>, examples: &[SyntheticExample], mode: ForwardMode, r_star: f64) -> Result<EvalReport> {
    let n_layers = backbone.config().n_layers;
    let mut predictions = Vec::with_capacity(examples.len());
    let mut correct = Vec::with_capacity(examples.len());
    let mut masks = Vec::with_capacity(examples.len());
    let mut retention = vec![0.0; n_layers];
    let mut repair = 0.0;
    let mut teacher_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_layers];
    let mut student_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_layers];
    for ex in examples {
        let tape = Tape::new();
        let bb = backbone.bind(&tape, false);
        let ans: Vec<usize> = ex.layout.answer_span().collect();
        let teacher = backbone.forward(&bb, &ex.tokens, &ex.layout, ForwardMode::Teacher, &mut NoHooks)?;
        let (out, mask) = match model {
            Some(m) => {
                let vars = m.store().bind(&tape, false);
                let s = student_forward(m, backbone, &bb, &vars, &ex.tokens, &ex.layout, mode, PassSettings::infer(r_star))?;
                (s.out, s.mask)
            }
            None => (teacher.clone(), CumulativeMask::dense(ex.layout.n_vision)),
        };
        let pred = argmax_rows(&out.answer_logits(&ex.layout)?.value());
        correct.push(pred == ex.targets);
        predictions.push(pred);
        for (l, r) in mask.per_layer_retention(n_layers).into_iter().enumerate() {
            retention[l] += r;
        }
        if let Some(m) = model {
            let layers = &m.config().adapter_layers;
            let mut s = 0.0;
            for &l in layers {
                let a = out.trace.rows_at(l, &ans)?.value().clone();
                let b = teacher.trace.rows_at(l, &ans)?.value().clone();
                s += w2sq_values(&a, &b)?;
            }
            repair += s / layers.len() as f64;
        }
        for l in 0..n_layers {
            let a = out.trace.rows_at(l, &ans)?.value().clone();
            let b = teacher.trace.rows_at(l, &ans)?.value().clone();
            for r in 0..a.rows() {
                student_rows[l].push(a.row(r).to_vec());
                teacher_rows[l].push(b.row(r).to_vec());
            }
        }
        masks.push(mask);
    }
    let n = examples.len().max(1) as f64;
    for r in &mut retention {
        *r /= n;
    }
    let drift = (0..n_layers)
        .map(|l| {
            if student_rows[l].is_empty() {
                return Ok(0.0);
            }
            let a = Tensor::from_rows(&student_rows[l])?;
            let b = Tensor::from_rows(&teacher_rows[l])?;
            w2sq_values(&a, &b)
        })
        .collect::<Result<Vec<f64>>>()?;
    let r_bar = average_retention(&retention);
    let n_vision = examples.first().map(|e| e.layout.n_vision).unwrap_or(0) as f64;
    Ok(EvalReport {
        accuracy: correct.iter().filter(|&&c| c).count() as f64 / n,
        predictions,
        correct,
        avg_tokens: r_bar * n_vision,
        per_layer_retention: retention,
        r_bar,
        masks,
        repair_loss: repair / n,
        drift,
    })
}

/// Small configuration used by the end-to-end gradient check.
pub struct GradcheckSetup {
    pub backbone: Backbone,
    pub model: RcpModel,
    pub batch: Vec<SyntheticExample>,
    pub settings: LossSettings,
}

impl GradcheckSetup {
    /// Four layers, width 8, six vision tokens, two pruning stages and two adapters.
    /// Adapter weights that start at zero are perturbed so every parameter has a
    /// live gradient path, and the pruning bias starts at 0 so tokens do get dropped.
    pub fn toy(seed: u64) -> Result<Self> {
        let task = TaskConfig {
            n_system: 1,
            n_vision: 6,
            n_question: 2,
            n_answer: 2,
            n_types: 2,
            n_values: 3,
            n_noise: 2,
            k_informative: 2,
        };
        let bcfg = task.backbone_config(4, 8, 2, 16);
        let backbone = Backbone::new(bcfg.clone(), seed)?;
        let cfg = crate::rcp::RcpConfig {
            pruner_layers: vec![0, 2],
            adapter_layers: vec![2, 3],
            pruner: crate::pruner::PrunerConfig {
                n_queries: 4,
                d_p: 4,
                bias_init: 0.0,
                query_dropout: 0.2,
            },
            adapter: crate::adapter::AdapterConfig { d_b: 2, alpha_init: 1.0 },
            variant: crate::rcp::Variant::Full,
        };
        let mut model = RcpModel::new(cfg, &bcfg, seed)?;
        let mut rng = Rng::new(seed).substream(Purpose::Test, 0, 0);
        let zero_init: Vec<crate::params::ParamId> = model
            .adapters()
            .iter()
            .flat_map(|a| [a.up, a.w_gamma, a.w_beta])
            .collect();
        for id in zero_init {
            let shape = model.store().get(id).shape().to_vec();
            *model.store_mut().get_mut(id) = rng.normal_tensor(&shape, 0.5);
        }
        let batch = generate_batch(&task, seed, Split::Train, 0, 2)?;
        Ok(Self {
            backbone,
            model,
            batch,
            settings: LossSettings {
                tau: 1.0,
                r_star: 0.5,
                weights: LossWeights::default(),
                seed,
                step: 0,
            },
        })
    }

    /// Finite-difference check of the total loss against every plug-in parameter.
    pub fn check(&self, h: f64) -> Result<GradCheckReport> {
        finite_diff_check(
            |tape, params| {
                let vars = Bound::from_vars(params.to_vec());
                Ok(batch_loss(tape, &self.backbone, &self.model, &vars, &self.batch, &self.settings)?.total)
            },
            self.model.store().tensors(),
            h,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_ranges_do_not_overlap() {
        let t = TaskConfig::default();
        assert_eq!(t.vocab_size(), 40);
        assert_eq!(t.question_token(2) + 1, t.noise_token(0));
        assert_eq!(t.noise_token(7) + 1, t.object_token(0, 0));
        assert_eq!(t.object_token(2, 5) + 1, t.value_token(0));
        assert_eq!(t.value_token(5) + 1, t.vocab_size());
    }

    #[test]
    fn generated_examples_follow_the_layout() {
        let t = TaskConfig::default();
        let ex = generate_example(&t, 3, Split::Train, 17).unwrap();
        assert_eq!(ex.tokens.len(), t.seq_len());
        assert_eq!(ex.tokens[0], BOS);
        let q = ex.layout.question_span().start;
        assert_eq!(ex.tokens[q], t.question_token(ex.query_type));
        assert_eq!(ex.tokens[ex.layout.answer_span().start], ANS);
        assert_eq!(ex.targets, vec![t.value_token(ex.answer_value), EOS]);
        assert_eq!(ex, generate_example(&t, 3, Split::Train, 17).unwrap());
        assert_ne!(ex, generate_example(&t, 3, Split::Eval, 17).unwrap());
    }

    #[test]
    fn invalid_counts_are_config_errors() {
        let t = TaskConfig {
            k_informative: 40,
            ..TaskConfig::default()
        };
        assert!(matches!(generate_example(&t, 1, Split::Train, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn every_token_informative_is_allowed() {
        let t = TaskConfig {
            n_vision: 9,
            k_informative: 9,
            ..TaskConfig::default()
        };
        let ex = generate_example(&t, 1, Split::Train, 0).unwrap();
        assert_eq!(ex.informative, (0..9).collect::<Vec<_>>());
    }
}
