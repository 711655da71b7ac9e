//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only list of nodes; each node stores its forward
//! value eagerly together with the operation that produced it. [`Var`] is a
//! cheap `Copy` handle into one tape. Calling [`Tape::backward`] walks the
//! nodes in reverse creation order and accumulates gradients for every node
//! that (transitively) depends on a parameter leaf.
//!
//! Non-differentiable capture points (`stop_gradient`, `indicator_gt`,
//! [`Tape::freeze`]) can be recorded on one tape and replayed on another.
//! Replaying makes those points constants at their recorded values, which is
//! the function the straight-through gradient actually differentiates; the
//! finite-difference oracle in [`crate::gradcheck`] relies on this.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

/// `sqrt(2/pi)` in the tanh approximation of GELU.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh approximation of GELU.
pub const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddScalar(usize, usize),
    MulScalar(usize, usize),
    Affine(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sigmoid(usize),
    Gelu(usize),
    Sqrt(usize),
    Log(usize),
    Exp(usize),
    Abs(usize),
    Recip(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(usize),
    CausalSoftmax {
        scores: usize,
        key_mask: Option<usize>,
        unweighted: Vec<f64>,
    },
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    FillWhere(usize, Vec<bool>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Values captured at non-differentiable points of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct FrozenLog {
    values: Rc<Vec<Tensor>>,
}

impl FrozenLog {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

enum FrozenMode {
    Off,
    Record(Vec<Tensor>),
    Replay { log: FrozenLog, cursor: usize },
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    frozen: RefCell<FrozenMode>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            frozen: RefCell::new(FrozenMode::Off),
        }
    }

    /// A tape that records every frozen capture point.
    pub fn recording() -> Self {
        let t = Self::new();
        *t.frozen.borrow_mut() = FrozenMode::Record(Vec::new());
        t
    }

    /// A tape whose frozen capture points return the values from `log`, in order.
    pub fn replaying(log: FrozenLog) -> Self {
        let t = Self::new();
        *t.frozen.borrow_mut() = FrozenMode::Replay { log, cursor: 0 };
        t
    }

    /// Takes the recorded log; the tape stops recording afterwards.
    pub fn take_frozen(&self) -> FrozenLog {
        match std::mem::replace(&mut *self.frozen.borrow_mut(), FrozenMode::Off) {
            FrozenMode::Record(values) => FrozenLog {
                values: Rc::new(values),
            },
            FrozenMode::Replay { log, .. } => log,
            FrozenMode::Off => FrozenLog::default(),
        }
    }

    /// Evaluates `compute` at a non-differentiable capture point.
    pub fn freeze(&self, compute: impl FnOnce() -> Tensor) -> Tensor {
        let mut mode = self.frozen.borrow_mut();
        match &mut *mode {
            FrozenMode::Off => {
                drop(mode);
                compute()
            }
            FrozenMode::Record(values) => {
                let t = compute();
                values.push(t.clone());
                t
            }
            FrozenMode::Replay { log, cursor } => {
                let t = log
                    .values
                    .get(*cursor)
                    .cloned()
                    .expect("frozen replay ran past the recorded log");
                *cursor += 1;
                t
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(Error::shape("backward", root_value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::AddRow(a, v) => {
            let c = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gv) = acc(grads, nodes, *v) {
                for (i, &gi) in g.iter().enumerate() {
                    gv[i % c] += gi;
                }
            }
        }
        Op::MulRow(a, v) => {
            let c = out.cols();
            let (av, vv) = (nodes[*a].value.data(), nodes[*v].value.data());
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * vv[i % c];
                }
            }
            if let Some(gv) = acc(grads, nodes, *v) {
                for i in 0..g.len() {
                    gv[i % c] += g[i] * av[i];
                }
            }
        }
        Op::AddScalar(a, s) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gs) = acc(grads, nodes, *s) {
                gs[0] += g.iter().sum::<f64>();
            }
        }
        Op::MulScalar(a, s) => {
            let sv = nodes[*s].value.item();
            let av = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * sv);
            }
            if let Some(gs) = acc(grads, nodes, *s) {
                gs[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        Op::Affine(a, mul) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * mul);
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(ga) = acc(grads, nodes, *a) {
                matmul_nt_into(g, bv.data(), ga, m, n, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                matmul_tn_into(av.data(), g, gb, k, m, n);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            if let Some(ga) = acc(grads, nodes, *a) {
                // out is r×c, input is c×r
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Gelu(a) => {
            let x = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_grad_scalar(x[i]);
                }
            }
        }
        Op::Sqrt(a) => {
            let y = out.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * 0.5 / y[i];
                }
            }
        }
        Op::Log(a) => {
            let x = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / x[i];
                }
            }
        }
        Op::Exp(a) => {
            let y = out.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }
        }
        Op::Abs(a) => {
            let x = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    // subgradient 0 at the kink
                    let s = if x[i] > 0.0 {
                        1.0
                    } else if x[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    ga[i] += g[i] * s;
                }
            }
        }
        Op::Recip(a) => {
            let y = out.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] -= g[i] * y[i] * y[i];
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::SumRows(a) => {
            let c = out.numel();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i % c];
                }
            }
        }
        Op::SumCols(a) => {
            let c = nodes[*a].value.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i / c];
                }
            }
        }
        Op::BroadcastRows(a) => {
            let c = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (i, &gi) in g.iter().enumerate() {
                    ga[i % c] += gi;
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = out.cols();
            let r = out.rows();
            let gam = nodes[*gamma].value.data();
            if let Some(gb) = acc(grads, nodes, *beta) {
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % c] += gi;
                }
            }
            if let Some(gg) = acc(grads, nodes, *gamma) {
                for i in 0..g.len() {
                    gg[i % c] += g[i] * xhat[i];
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let mut dxhat = vec![0.0; c];
                for row in 0..r {
                    let base = row * c;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        dxhat[j] = g[base + j] * gam[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[base + j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        gx[base + j] += rstd[row] * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let c = out.cols();
            let y = out.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for row in 0..out.numel() / c {
                    let base = row * c;
                    let dot: f64 = (0..c).map(|j| y[base + j] * g[base + j]).sum();
                    for j in 0..c {
                        ga[base + j] += y[base + j] * (g[base + j] - dot);
                    }
                }
            }
        }
        Op::CausalSoftmax {
            scores,
            key_mask,
            unweighted,
        } => {
            let n = out.cols();
            let w = out.data();
            let mut dk = vec![0.0; n];
            if let Some(gs) = acc(grads, nodes, *scores) {
                for i in 0..n {
                    let base = i * n;
                    let dot: f64 = (0..=i).map(|j| w[base + j] * g[base + j]).sum();
                    for j in 0..=i {
                        gs[base + j] += w[base + j] * (g[base + j] - dot);
                    }
                }
            }
            if let Some(km) = key_mask {
                if nodes[*km].requires_grad {
                    for i in 0..n {
                        let base = i * n;
                        let dot: f64 = (0..=i).map(|j| w[base + j] * g[base + j]).sum();
                        for j in 0..i {
                            dk[j] += unweighted[base + j] * (g[base + j] - dot);
                        }
                    }
                    if let Some(gk) = acc(grads, nodes, *km) {
                        gk.iter_mut().zip(&dk).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let c = out.cols();
            let r = out.rows();
            let mut off = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(gp) = acc(grads, nodes, p) {
                    for i in 0..r {
                        for j in 0..w {
                            gp[i * w + j] += g[i * c + off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Op::SliceCols(a, start) => {
            let w = out.cols();
            let c = nodes[*a].value.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..out.rows() {
                    for j in 0..w {
                        ga[i * c + start + j] += g[i * w + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                if let Some(gp) = acc(grads, nodes, p) {
                    gp.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y);
                }
                off += n;
            }
        }
        Op::GatherRows(a, idx) => {
            let c = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] += g[r * c + j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let v = nodes[*logits].value.cols();
            let scale = g[0] / targets.len() as f64;
            if let Some(gl) = acc(grads, nodes, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                    }
                }
            }
        }
        Op::FillWhere(a, mask) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    if !mask[i] {
                        ga[i] += g[i];
                    }
                }
            }
        }
    }
}

/// Gradients produced by one reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = v.shape();
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(&[self.id])
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value().map(f);
        let rg = self.requires_grad();
        self.tape.push(v, op, rg)
    }

    fn binary(&self, other: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let v = {
            let (a, b) = (self.value(), other.value());
            a.zip_map(&b, name, f)?
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(v, op, rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    fn row_op(&self, v: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), v.value());
            if b.rank() != 1 || b.numel() != a.cols() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let c = a.cols();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[i % c]))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.tape.requires(&[self.id, v.id]);
        Ok(self.tape.push(out, op, rg))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, v: &Var<'t>) -> Result<Var<'t>> {
        self.row_op(v, "add_row", |a, b| a + b, Op::AddRow(self.id, v.id))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&self, v: &Var<'t>) -> Result<Var<'t>> {
        self.row_op(v, "mul_row", |a, b| a * b, Op::MulRow(self.id, v.id))
    }

    fn scalar_op(&self, s: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let out = {
            let sv = s.value();
            if sv.numel() != 1 {
                return Err(Error::shape(name, &self.shape(), sv.shape()));
            }
            let k = sv.item();
            self.value().map(|x| f(x, k))
        };
        let rg = self.tape.requires(&[self.id, s.id]);
        Ok(self.tape.push(out, op, rg))
    }

    /// Adds a one-element variable to every entry.
    pub fn add_scalar(&self, s: &Var<'t>) -> Result<Var<'t>> {
        self.scalar_op(s, "add_scalar", |a, b| a + b, Op::AddScalar(self.id, s.id))
    }

    /// Multiplies every entry by a one-element variable.
    pub fn mul_scalar(&self, s: &Var<'t>) -> Result<Var<'t>> {
        self.scalar_op(s, "mul_scalar", |a, b| a * b, Op::MulScalar(self.id, s.id))
    }

    /// `mul * x + add` with constant coefficients.
    pub fn affine(&self, mul: f64, add: f64) -> Var<'t> {
        self.unary(|x| mul * x + add, Op::Affine(self.id, mul))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.affine(c, 0.0)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id), rg))
    }

    pub fn transpose(&self) -> Var<'t> {
        let v = self.value().transpose();
        let rg = self.requires_grad();
        self.tape.push(v, Op::Transpose(self.id), rg)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::Reshape(self.id), rg))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid_scalar, Op::Sigmoid(self.id))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(gelu_scalar, Op::Gelu(self.id))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(f64::abs, Op::Abs(self.id))
    }

    pub fn recip(&self) -> Var<'t> {
        self.unary(|x| 1.0 / x, Op::Recip(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        let rg = self.requires_grad();
        self.tape.push(v, Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Reduces a matrix along `axis` (0: over rows → `[cols]`, 1: over columns → `[rows]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let (v, op) = {
            let a = self.value();
            if a.rank() != 2 || axis > 1 {
                return Err(Error::shape("sum_axis", a.shape(), &[axis]));
            }
            let (r, c) = (a.rows(), a.cols());
            if axis == 0 {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in out.iter_mut().zip(a.row(i)) {
                        *o += x;
                    }
                }
                (Tensor::vector(out), Op::SumRows(self.id))
            } else {
                let out = (0..r).map(|i| a.row(i).iter().sum()).collect();
                (Tensor::vector(out), Op::SumCols(self.id))
            }
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(v, op, rg))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let n = {
            let a = self.value();
            if axis == 0 {
                a.rows()
            } else {
                a.cols()
            }
        };
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    /// Weighted mean of rows: `Σ_i w_i·x_i / Σ_i w_i`.
    pub fn masked_mean_rows(&self, weights: &Var<'t>) -> Result<Var<'t>> {
        let (r, c) = {
            let v = self.value();
            (v.rows(), v.cols())
        };
        let w = weights.reshape(&[1, r])?;
        let total = weights.sum().recip();
        w.matmul(self)?.reshape(&[c])?.mul_scalar(&total)
    }

    /// Repeats a vector as `n` identical rows.
    pub fn broadcast_rows(&self, n: usize) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            if a.rank() != 1 {
                return Err(Error::shape("broadcast_rows", a.shape(), &[n]));
            }
            let mut data = Vec::with_capacity(n * a.numel());
            for _ in 0..n {
                data.extend_from_slice(a.data());
            }
            Tensor::new(vec![n, a.numel()], data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::BroadcastRows(self.id), rg))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (v, xhat, rstd) = {
            let x = self.value();
            let (g, b) = (gamma.value(), beta.value());
            let c = x.cols();
            if g.numel() != c || b.numel() != c {
                return Err(Error::shape("layer_norm", x.shape(), g.shape()));
            }
            let r = x.numel() / c;
            let mut xhat = vec![0.0; x.numel()];
            let mut rstd = vec![0.0; r];
            let mut out = vec![0.0; x.numel()];
            for i in 0..r {
                let row = &x.data()[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[i] = rs;
                for j in 0..c {
                    let xh = (row[j] - mean) * rs;
                    xhat[i * c + j] = xh;
                    out[i * c + j] = xh * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, rstd)
        };
        let rg = self.tape.requires(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            v,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last dimension. `-inf` entries map to exactly 0.
    pub fn softmax_lastdim(&self) -> Result<Var<'t>> {
        let v = softmax_rows(&self.value())?;
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::Softmax(self.id), rg))
    }

    /// Causal softmax over a square score matrix with optional multiplicative key weights.
    ///
    /// Row `i` gets `w_ij = k_ij·exp(s_ij − M_i) / Σ_l k_il·exp(s_il − M_i)` for `j ≤ i`
    /// and 0 above the diagonal, where `k_ij = key_mask[j]` for `j < i` and
    /// `k_ii = 1`. With a 0/1 mask this equals adding `-inf` to the logits of
    /// masked keys; with a differentiable mask the key weights receive gradient.
    pub fn causal_softmax(&self, key_mask: Option<&Var<'t>>) -> Result<Var<'t>> {
        let (w, u) = {
            let s = self.value();
            let n = s.cols();
            if s.rank() != 2 || s.rows() != n {
                return Err(Error::shape("causal_softmax", s.shape(), &[n, n]));
            }
            let km = key_mask.map(|k| k.value());
            if let Some(k) = &km {
                if k.numel() != n {
                    return Err(Error::shape("causal_softmax", s.shape(), k.shape()));
                }
            }
            let mut w = vec![0.0; n * n];
            let mut u = vec![0.0; n * n];
            for i in 0..n {
                let row = &s.data()[i * n..i * n + i + 1];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..=i {
                    let e = (row[j] - m).exp();
                    u[i * n + j] = e;
                    let k = match &km {
                        Some(k) if j < i => k.data()[j],
                        _ => 1.0,
                    };
                    z += k * e;
                }
                for j in 0..=i {
                    let k = match &km {
                        Some(k) if j < i => k.data()[j],
                        _ => 1.0,
                    };
                    u[i * n + j] /= z;
                    w[i * n + j] = k * u[i * n + j];
                }
            }
            (Tensor::new(vec![n, n], w)?, u)
        };
        let mut ids = vec![self.id];
        if let Some(k) = key_mask {
            ids.push(k.id);
        }
        let rg = self.tape.requires(&ids);
        Ok(self.tape.push(
            w,
            Op::CausalSoftmax {
                scores: self.id,
                key_mask: key_mask.map(|k| k.id),
                unweighted: u,
            },
            rg,
        ))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts[0].tape;
        let v = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
            let r = vals[0].rows();
            let c: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for v in &vals {
                    if v.rows() != r {
                        return Err(Error::shape("concat_cols", vals[0].shape(), v.shape()));
                    }
                    data.extend_from_slice(v.row(i));
                }
            }
            Tensor::new(vec![r, c], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(v, Op::ConcatCols(ids), rg))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            if a.rank() != 2 || end > a.cols() || start >= end {
                return Err(Error::shape("slice_cols", a.shape(), &[start, end]));
            }
            let w = end - start;
            let mut data = Vec::with_capacity(a.rows() * w);
            for i in 0..a.rows() {
                data.extend_from_slice(&a.row(i)[start..end]);
            }
            Tensor::new(vec![a.rows(), w], data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::SliceCols(self.id, start), rg))
    }

    /// Stacks matrices (or vectors, as single rows) vertically.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts[0].tape;
        let v = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
            let c = vals[0].cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for v in &vals {
                if v.cols() != c {
                    return Err(Error::shape("concat_rows", vals[0].shape(), v.shape()));
                }
                rows += v.numel() / c;
                data.extend_from_slice(v.data());
            }
            Tensor::new(vec![rows, c], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(v, Op::ConcatRows(ids), rg))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            let r = a.numel() / a.cols();
            if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
                return Err(Error::shape("gather_rows", a.shape(), &[bad]));
            }
            if a.rank() == 1 {
                Tensor::vector(idx.iter().map(|&i| a.data()[i]).collect())
            } else {
                a.gather_rows(idx)
            }
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::GatherRows(self.id, idx.to_vec()), rg))
    }

    /// Mean token-level cross-entropy of row-wise logits against target ids.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = {
            let l = self.value();
            let v = l.cols();
            if l.rows() != targets.len() || targets.iter().any(|&t| t >= v) {
                return Err(Error::shape("cross_entropy", l.shape(), &[targets.len()]));
            }
            let p = softmax_rows(&l)?;
            let mut loss = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = l.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                loss += lse - row[t];
            }
            (loss / targets.len() as f64, p.into_data())
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Overwrites positions where `mask` is true with `value`; those positions pass no gradient.
    pub fn fill_where(&self, mask: &[bool], value: f64) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            if mask.len() != a.numel() {
                return Err(Error::shape("fill_where", a.shape(), &[mask.len()]));
            }
            let data = a
                .data()
                .iter()
                .zip(mask)
                .map(|(&x, &m)| if m { value } else { x })
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::FillWhere(self.id, mask.to_vec()), rg))
    }

    /// Same value, no gradient. Recorded as a frozen capture point.
    pub fn stop_gradient(&self) -> Var<'t> {
        let v = self.tape.freeze(|| self.value().clone());
        self.tape.constant(v)
    }

    /// `1` where the value is strictly greater than `threshold`, else `0`. Frozen capture point.
    pub fn indicator_gt(&self, threshold: f64) -> Var<'t> {
        let v = self
            .tape
            .freeze(|| self.value().map(|x| if x > threshold { 1.0 } else { 0.0 }));
        self.tape.constant(v)
    }

    /// Straight-through threshold: forward is `1[y > 0.5]`, backward is the identity.
    ///
    /// Built literally as `1[y > 0.5] − sg(y) + y`.
    pub fn straight_through(&self) -> Result<Var<'t>> {
        let hard = self.indicator_gt(0.5);
        hard.sub(&self.stop_gradient())?.add(self)
    }
}

/// Row softmax over the last dimension with `-inf` sentinels.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    if c == 0 {
        return Err(Error::shape("softmax", x.shape(), &[1]));
    }
    let mut out = vec![0.0; x.numel()];
    for r in 0..x.numel() / c {
        let row = &x.data()[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::MaskedRow { row: r });
        }
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[r * c + j] = e;
            z += e;
        }
        for j in 0..c {
            out[r * c + j] /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
