//! Reverse-mode automatic differentiation on a tape of tensor operations.
//!
//! A [`Graph`] owns an append-only tape of nodes. Each node stores its
//! forward [`Tensor`] value, a persistent gradient slot of the same shape,
//! and a record of the producing operation. [`Value`] is a copyable handle
//! into the tape; arithmetic methods on `Value` append new nodes.
//!
//! Because inputs always precede outputs on the tape, a single reverse
//! sweep over node indices is a topological traversal: every node is
//! visited exactly once and fan-out is handled by summing incoming
//! gradient contributions. Calling [`Value::backward`] twice without
//! zeroing accumulates into the gradient slots.
//!
//! Every operation checks its output for NaN/infinity; the first violation
//! poisons the graph and surfaces as [`GraphError::NonFinite`] when
//! `backward` (or [`Graph::check_finite`]) runs. Shape mismatches are
//! programming errors and panic.

use std::cell::{Cell, RefCell};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{matmul, Tensor};

#[derive(Debug, Error)]
pub enum GraphError {
    /// An operation produced NaN or infinite values.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    /// `backward` was called on a value with more than one element.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Concat { axis: usize, inputs: Vec<usize> },
    SliceRows { input: usize, start: usize, len: usize },
    SliceCols { input: usize, start: usize, len: usize },
    Reshape(usize),
    Softmax(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    ClampMin { input: usize, min: f64 },
    Powf { input: usize, exponent: f64 },
    Affine { input: usize, mul: f64 },
    SumAll(usize),
    SumLastKeep(usize),
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of tensor operations confined to one thread.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    rng: RefCell<ChaCha8Rng>,
    training: Cell<bool>,
    poison: RefCell<Option<String>>,
}

impl Graph {
    /// Graph with a fixed dropout RNG seed; starts in evaluation mode.
    pub fn new(seed: u64) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            training: Cell::new(false),
            poison: RefCell::new(None),
        }
    }

    /// Toggles training mode (enables dropout sampling).
    pub fn set_training(&self, on: bool) {
        self.training.set(on);
    }

    pub fn is_training(&self) -> bool {
        self.training.get()
    }

    /// Non-trainable leaf: inputs, masks, label encodings. No gradient is
    /// ever propagated into it.
    pub fn constant(&self, t: Tensor) -> Value<'_> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Trainable leaf with a gradient slot.
    pub fn variable(&self, t: Tensor) -> Value<'_> {
        self.push(t, Op::Leaf, true, "variable")
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns the recorded non-finite diagnostic, if any op produced one.
    pub fn check_finite(&self) -> Result<(), GraphError> {
        match &*self.poison.borrow() {
            Some(msg) => Err(GraphError::NonFinite(msg.clone())),
            None => Ok(()),
        }
    }

    /// Clears every gradient slot in the tape.
    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = Tensor::zeros(node.grad.shape().to_vec());
        }
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Value<'_> {
        if !value.all_finite() {
            let mut poison = self.poison.borrow_mut();
            if poison.is_none() {
                *poison = Some(name.to_string());
            }
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, grad, op, needs_grad });
        Value { graph: self, id: nodes.len() - 1 }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }
}

/// Handle to one tape node. Copyable; tied to its graph's lifetime.
#[derive(Clone, Copy)]
pub struct Value<'g> {
    graph: &'g Graph,
    id: usize,
}

// ---------------------------------------------------------------------------
// Broadcasting helpers (right-aligned, NumPy-style), used by elementwise ops.
// ---------------------------------------------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {a:?} and {b:?} cannot broadcast"
        );
        out[i] = da.max(db);
    }
    out
}

fn pad_left(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1usize; rank];
    out[rank - shape.len()..].copy_from_slice(shape);
    out
}

/// Expands `t` to `out_shape` by repeating broadcast axes.
fn expand_to(t: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    let rank = out_shape.len();
    let src = pad_left(t.shape(), rank);
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; rank];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..rank).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut sf = 0usize;
        let mut stride = 1usize;
        for d in (0..rank).rev() {
            let c = if src[d] == 1 { 0 } else { coords[d] };
            sf += c * stride;
            stride *= src[d];
        }
        *slot = t.data()[sf];
    }
    out
}

/// Sums `grad` (shaped `grad_shape`) down to `target` by collapsing the
/// axes that were broadcast.
fn reduce_to(grad: &[f64], grad_shape: &[usize], target: &[usize]) -> Tensor {
    if grad_shape == target {
        return Tensor::new(target.to_vec(), grad.to_vec());
    }
    let rank = grad_shape.len();
    let dst = pad_left(target, rank);
    let target_numel: usize = target.iter().product();
    let mut out = vec![0.0; target_numel];
    let mut coords = vec![0usize; rank];
    for (flat, g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..rank).rev() {
            coords[d] = rem % grad_shape[d];
            rem /= grad_shape[d];
        }
        let mut tf = 0usize;
        let mut stride = 1usize;
        for d in (0..rank).rev() {
            let c = if dst[d] == 1 { 0 } else { coords[d] };
            tf += c * stride;
            stride *= dst[d];
        }
        out[tf] += g;
    }
    Tensor::new(target.to_vec(), out)
}

fn softmax_last(t: &Tensor) -> Tensor {
    let cols = t.last_dim();
    assert!(cols > 0, "softmax over empty axis");
    let rows = t.numel() / cols;
    let mut out = vec![0.0; t.numel()];
    for r in 0..rows {
        let src = &t.data()[r * cols..(r + 1) * cols];
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (d, &x) in dst.iter_mut().zip(src) {
            let e = (x - max).exp();
            *d = e;
            sum += e;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

// Arithmetic methods keep the conventional autodiff names (`add`, `mul`,
// ...) rather than the std operator traits; `Value` is a tape handle and
// the methods append nodes.
#[allow(clippy::should_implement_trait)]
impl<'g> Value<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.shape_of(self.id)
    }

    /// Clone of the forward value.
    pub fn tensor(&self) -> Tensor {
        self.graph.value_of(self.id)
    }

    /// Clone of the accumulated gradient slot.
    pub fn grad(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    pub fn item(&self) -> f64 {
        self.tensor().item()
    }

    fn binary(self, rhs: Value<'g>, kind: BinKind) -> Value<'g> {
        let a = self.tensor();
        let b = rhs.tensor();
        let out_shape = broadcast_shape(a.shape(), b.shape());
        let ae = expand_to(&a, &out_shape);
        let be = expand_to(&b, &out_shape);
        let data: Vec<f64> = match kind {
            BinKind::Add => ae.iter().zip(&be).map(|(x, y)| x + y).collect(),
            BinKind::Sub => ae.iter().zip(&be).map(|(x, y)| x - y).collect(),
            BinKind::Mul => ae.iter().zip(&be).map(|(x, y)| x * y).collect(),
            BinKind::Div => ae.iter().zip(&be).map(|(x, y)| x / y).collect(),
        };
        let (op, name) = match kind {
            BinKind::Add => (Op::Add(self.id, rhs.id), "add"),
            BinKind::Sub => (Op::Sub(self.id, rhs.id), "sub"),
            BinKind::Mul => (Op::Mul(self.id, rhs.id), "mul"),
            BinKind::Div => (Op::Div(self.id, rhs.id), "div"),
        };
        let needs = self.graph.needs(self.id) || self.graph.needs(rhs.id);
        self.graph.push(Tensor::new(out_shape, data), op, needs, name)
    }

    pub fn add(self, rhs: Value<'g>) -> Value<'g> {
        self.binary(rhs, BinKind::Add)
    }

    pub fn sub(self, rhs: Value<'g>) -> Value<'g> {
        self.binary(rhs, BinKind::Sub)
    }

    pub fn mul(self, rhs: Value<'g>) -> Value<'g> {
        self.binary(rhs, BinKind::Mul)
    }

    pub fn div(self, rhs: Value<'g>) -> Value<'g> {
        self.binary(rhs, BinKind::Div)
    }

    /// Matrix product of two rank-2 values.
    pub fn matmul(self, rhs: Value<'g>) -> Value<'g> {
        let out = matmul(&self.tensor(), &rhs.tensor());
        let needs = self.graph.needs(self.id) || self.graph.needs(rhs.id);
        self.graph.push(out, Op::Matmul(self.id, rhs.id), needs, "matmul")
    }

    /// Transpose of a rank-2 value.
    pub fn t(self) -> Value<'g> {
        let out = self.tensor().transposed();
        self.unary(out, Op::Transpose(self.id), "transpose")
    }

    fn unary(self, out: Tensor, op: Op, name: &str) -> Value<'g> {
        let needs = self.graph.needs(self.id);
        self.graph.push(out, op, needs, name)
    }

    /// Rows `[start, start+len)` along axis 0 (any rank >= 1).
    pub fn slice_rows(self, start: usize, len: usize) -> Value<'g> {
        let t = self.tensor();
        assert!(t.rank() >= 1, "slice_rows requires rank >= 1");
        let n = t.shape()[0];
        assert!(start + len <= n, "slice_rows {start}+{len} out of {n} rows");
        let row = t.numel() / n.max(1);
        let data = t.data()[start * row..(start + len) * row].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        self.unary(Tensor::new(shape, data), Op::SliceRows { input: self.id, start, len }, "slice_rows")
    }

    /// Columns `[start, start+len)` of a rank-2 value.
    pub fn slice_cols(self, start: usize, len: usize) -> Value<'g> {
        let t = self.tensor();
        assert_eq!(t.rank(), 2, "slice_cols requires rank 2");
        let (r, c) = (t.shape()[0], t.shape()[1]);
        assert!(start + len <= c, "slice_cols {start}+{len} out of {c} cols");
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        self.unary(Tensor::new(vec![r, len], data), Op::SliceCols { input: self.id, start, len }, "slice_cols")
    }

    /// Same data, new shape (element counts must agree).
    pub fn reshape(self, shape: Vec<usize>) -> Value<'g> {
        let t = self.tensor();
        let numel: usize = shape.iter().product();
        assert_eq!(numel, t.numel(), "reshape {:?} -> {shape:?}", t.shape());
        self.unary(Tensor::new(shape, t.data().to_vec()), Op::Reshape(self.id), "reshape")
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(self) -> Value<'g> {
        let out = softmax_last(&self.tensor());
        self.unary(out, Op::Softmax(self.id), "softmax")
    }

    pub fn relu(self) -> Value<'g> {
        let out = self.tensor().map(|x| x.max(0.0));
        self.unary(out, Op::Relu(self.id), "relu")
    }

    pub fn tanh(self) -> Value<'g> {
        let out = self.tensor().map(f64::tanh);
        self.unary(out, Op::Tanh(self.id), "tanh")
    }

    pub fn sigmoid(self) -> Value<'g> {
        let out = self.tensor().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(out, Op::Sigmoid(self.id), "sigmoid")
    }

    pub fn exp(self) -> Value<'g> {
        let out = self.tensor().map(f64::exp);
        self.unary(out, Op::Exp(self.id), "exp")
    }

    /// Natural log. Callers clamp first when the argument may touch zero.
    pub fn log(self) -> Value<'g> {
        let out = self.tensor().map(f64::ln);
        self.unary(out, Op::Log(self.id), "log")
    }

    pub fn clamp_min(self, min: f64) -> Value<'g> {
        let out = self.tensor().map(|x| x.max(min));
        self.unary(out, Op::ClampMin { input: self.id, min }, "clamp_min")
    }

    pub fn powf(self, exponent: f64) -> Value<'g> {
        let out = self.tensor().map(|x| x.powf(exponent));
        self.unary(out, Op::Powf { input: self.id, exponent }, "powf")
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(self, mul: f64, add: f64) -> Value<'g> {
        let out = self.tensor().map(|x| mul * x + add);
        self.unary(out, Op::Affine { input: self.id, mul }, "affine")
    }

    pub fn neg(self) -> Value<'g> {
        self.affine(-1.0, 0.0)
    }

    pub fn scale(self, c: f64) -> Value<'g> {
        self.affine(c, 0.0)
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum_all(self) -> Value<'g> {
        let s: f64 = self.tensor().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id), "sum_all")
    }

    pub fn mean_all(self) -> Value<'g> {
        let n = self.tensor().numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sum over the last axis, keeping it as size 1 (e.g. `[T,D] -> [T,1]`).
    pub fn sum_last_keep(self) -> Value<'g> {
        let t = self.tensor();
        let cols = t.last_dim();
        let rows = t.numel() / cols;
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            data[r] = t.data()[r * cols..(r + 1) * cols].iter().sum();
        }
        let mut shape = t.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        self.unary(Tensor::new(shape, data), Op::SumLastKeep(self.id), "sum_last_keep")
    }

    pub fn mean_last_keep(self) -> Value<'g> {
        let d = self.tensor().last_dim();
        self.sum_last_keep().scale(1.0 / d as f64)
    }

    /// Inverted-scaling dropout: identity in eval mode; in training mode
    /// each element is zeroed with probability `p` and survivors are
    /// scaled by `1/(1-p)`, so the expected output equals the input.
    pub fn dropout(self, p: f64) -> Value<'g> {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0,1)");
        if p == 0.0 || !self.graph.is_training() {
            return self;
        }
        let shape = self.shape();
        let keep = 1.0 - p;
        let mask: Vec<f64> = {
            let mut rng = self.graph.rng.borrow_mut();
            (0..shape.iter().product::<usize>())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        };
        let mask = self.graph.constant(Tensor::new(shape, mask));
        self.mul(mask)
    }

    /// Accumulates `d loss / d node` into every gradient slot reachable
    /// from this scalar loss. Each tape node is processed exactly once.
    pub fn backward(self) -> Result<(), GraphError> {
        self.graph.check_finite()?;
        let loss_shape = self.shape();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(GraphError::NonScalarLoss(loss_shape));
        }

        let nodes = self.graph.nodes.borrow();
        let mut temp: Vec<Option<Tensor>> = vec![None; self.id + 1];
        temp[self.id] = Some(Tensor::ones(loss_shape));

        let add_into = |slot: &mut Option<Tensor>, contribution: Tensor| match slot {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *e += c;
                }
            }
            None => *slot = Some(contribution),
        };

        let mut done: Vec<Option<Tensor>> = vec![None; self.id + 1];
        for i in (0..=self.id).rev() {
            let Some(g) = temp[i].take() else { continue };
            if !nodes[i].needs_grad {
                continue;
            }
            let out_shape = nodes[i].value.shape().to_vec();
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if nodes[*a].needs_grad {
                        add_into(&mut temp[*a], reduce_to(g.data(), &out_shape, nodes[*a].value.shape()));
                    }
                    if nodes[*b].needs_grad {
                        add_into(&mut temp[*b], reduce_to(g.data(), &out_shape, nodes[*b].value.shape()));
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[*a].needs_grad {
                        add_into(&mut temp[*a], reduce_to(g.data(), &out_shape, nodes[*a].value.shape()));
                    }
                    if nodes[*b].needs_grad {
                        let neg: Vec<f64> = g.data().iter().map(|x| -x).collect();
                        add_into(&mut temp[*b], reduce_to(&neg, &out_shape, nodes[*b].value.shape()));
                    }
                }
                Op::Mul(a, b) => {
                    let ae = expand_to(&nodes[*a].value, &out_shape);
                    let be = expand_to(&nodes[*b].value, &out_shape);
                    if nodes[*a].needs_grad {
                        let da: Vec<f64> = g.data().iter().zip(&be).map(|(g, b)| g * b).collect();
                        add_into(&mut temp[*a], reduce_to(&da, &out_shape, nodes[*a].value.shape()));
                    }
                    if nodes[*b].needs_grad {
                        let db: Vec<f64> = g.data().iter().zip(&ae).map(|(g, a)| g * a).collect();
                        add_into(&mut temp[*b], reduce_to(&db, &out_shape, nodes[*b].value.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let ae = expand_to(&nodes[*a].value, &out_shape);
                    let be = expand_to(&nodes[*b].value, &out_shape);
                    if nodes[*a].needs_grad {
                        let da: Vec<f64> = g.data().iter().zip(&be).map(|(g, b)| g / b).collect();
                        add_into(&mut temp[*a], reduce_to(&da, &out_shape, nodes[*a].value.shape()));
                    }
                    if nodes[*b].needs_grad {
                        let db: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(ae.iter().zip(&be))
                            .map(|(g, (a, b))| -g * a / (b * b))
                            .collect();
                        add_into(&mut temp[*b], reduce_to(&db, &out_shape, nodes[*b].value.shape()));
                    }
                }
                Op::Matmul(a, b) => {
                    if nodes[*a].needs_grad {
                        let da = matmul(&g, &nodes[*b].value.transposed());
                        add_into(&mut temp[*a], da);
                    }
                    if nodes[*b].needs_grad {
                        let db = matmul(&nodes[*a].value.transposed(), &g);
                        add_into(&mut temp[*b], db);
                    }
                }
                Op::Transpose(a) => {
                    add_into(&mut temp[*a], g.transposed());
                }
                Op::Concat { axis, inputs } => match axis {
                    0 => {
                        let mut offset = 0;
                        for &inp in inputs {
                            let n = nodes[inp].value.shape()[0];
                            if nodes[inp].needs_grad {
                                let row = nodes[inp].value.numel() / n.max(1);
                                let part = g.data()[offset * row..(offset + n) * row].to_vec();
                                add_into(
                                    &mut temp[inp],
                                    Tensor::new(nodes[inp].value.shape().to_vec(), part),
                                );
                            }
                            offset += n;
                        }
                    }
                    1 => {
                        let rows = out_shape[0];
                        let total_cols = out_shape[1];
                        let mut offset = 0;
                        for &inp in inputs {
                            let c = nodes[inp].value.shape()[1];
                            if nodes[inp].needs_grad {
                                let mut part = Vec::with_capacity(rows * c);
                                for r in 0..rows {
                                    part.extend_from_slice(
                                        &g.data()[r * total_cols + offset..r * total_cols + offset + c],
                                    );
                                }
                                add_into(&mut temp[inp], Tensor::new(vec![rows, c], part));
                            }
                            offset += c;
                        }
                    }
                    _ => unreachable!("concat axis checked at construction"),
                },
                Op::SliceRows { input, start, len } => {
                    let src_shape = nodes[*input].value.shape().to_vec();
                    let row = nodes[*input].value.numel() / src_shape[0].max(1);
                    let mut full = Tensor::zeros(src_shape);
                    full.data_mut()[start * row..(start + len) * row].copy_from_slice(g.data());
                    add_into(&mut temp[*input], full);
                }
                Op::SliceCols { input, start, len } => {
                    let src_shape = nodes[*input].value.shape().to_vec();
                    let (r, c) = (src_shape[0], src_shape[1]);
                    let mut full = Tensor::zeros(vec![r, c]);
                    for i in 0..r {
                        full.data_mut()[i * c + start..i * c + start + len]
                            .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                    }
                    add_into(&mut temp[*input], full);
                }
                Op::Reshape(a) => {
                    let src_shape = nodes[*a].value.shape().to_vec();
                    add_into(&mut temp[*a], Tensor::new(src_shape, g.data().to_vec()));
                }
                Op::Softmax(a) => {
                    // dx = y * (g - sum(g * y, last axis))
                    let y = &nodes[i].value;
                    let cols = y.last_dim();
                    let rows = y.numel() / cols;
                    let mut dx = vec![0.0; y.numel()];
                    for r in 0..rows {
                        let ys = &y.data()[r * cols..(r + 1) * cols];
                        let gs = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = ys[c] * (gs[c] - dot);
                        }
                    }
                    add_into(&mut temp[*a], Tensor::new(y.shape().to_vec(), dx));
                }
                Op::Relu(a) => {
                    let x = &nodes[*a].value;
                    let dx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    add_into(&mut temp[*a], Tensor::new(x.shape().to_vec(), dx));
                }
                Op::Tanh(a) => {
                    let y = &nodes[i].value;
                    let dx: Vec<f64> = g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                    add_into(&mut temp[*a], Tensor::new(y.shape().to_vec(), dx));
                }
                Op::Sigmoid(a) => {
                    let y = &nodes[i].value;
                    let dx: Vec<f64> = g.data().iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                    add_into(&mut temp[*a], Tensor::new(y.shape().to_vec(), dx));
                }
                Op::Exp(a) => {
                    let y = &nodes[i].value;
                    let dx: Vec<f64> = g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect();
                    add_into(&mut temp[*a], Tensor::new(y.shape().to_vec(), dx));
                }
                Op::Log(a) => {
                    let x = &nodes[*a].value;
                    let dx: Vec<f64> = g.data().iter().zip(x.data()).map(|(g, x)| g / x).collect();
                    add_into(&mut temp[*a], Tensor::new(x.shape().to_vec(), dx));
                }
                Op::ClampMin { input, min } => {
                    let x = &nodes[*input].value;
                    let dx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| if x >= *min { *g } else { 0.0 })
                        .collect();
                    add_into(&mut temp[*input], Tensor::new(x.shape().to_vec(), dx));
                }
                Op::Powf { input, exponent } => {
                    let e = *exponent;
                    let x = &nodes[*input].value;
                    // d/dx x^e = e * x^(e-1); guarded at x = 0 where the
                    // one-sided limit would be infinite or indeterminate.
                    let dx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| {
                            if e == 0.0 {
                                0.0
                            } else if x == 0.0 {
                                if e == 1.0 {
                                    *g
                                } else {
                                    0.0
                                }
                            } else {
                                g * e * x.powf(e - 1.0)
                            }
                        })
                        .collect();
                    add_into(&mut temp[*input], Tensor::new(x.shape().to_vec(), dx));
                }
                Op::Affine { input, mul } => {
                    let dx: Vec<f64> = g.data().iter().map(|g| g * mul).collect();
                    add_into(&mut temp[*input], Tensor::new(out_shape.clone(), dx));
                }
                Op::SumAll(a) => {
                    let src_shape = nodes[*a].value.shape().to_vec();
                    add_into(&mut temp[*a], Tensor::full(src_shape, g.item()));
                }
                Op::SumLastKeep(a) => {
                    let src = &nodes[*a].value;
                    let cols = src.last_dim();
                    let rows = src.numel() / cols;
                    let mut dx = vec![0.0; src.numel()];
                    for r in 0..rows {
                        let gr = g.data()[r];
                        for c in 0..cols {
                            dx[r * cols + c] = gr;
                        }
                    }
                    add_into(&mut temp[*a], Tensor::new(src.shape().to_vec(), dx));
                }
            }
            done[i] = Some(g);
        }
        drop(nodes);

        let mut nodes = self.graph.nodes.borrow_mut();
        for (i, g) in done.into_iter().enumerate() {
            if let Some(g) = g {
                for (slot, c) in nodes[i].grad.data_mut().iter_mut().zip(g.data()) {
                    *slot += c;
                }
            }
        }
        Ok(())
    }
}

/// Concatenates along `axis` (0 for any rank, 1 for rank 2).
pub fn concat<'g>(values: &[Value<'g>], axis: usize) -> Value<'g> {
    assert!(!values.is_empty(), "concat of zero values");
    let graph = values[0].graph;
    let tensors: Vec<Tensor> = values.iter().map(|v| v.tensor()).collect();
    let out = match axis {
        0 => {
            let tail = &tensors[0].shape()[1..];
            let mut rows = 0;
            let mut data = Vec::new();
            for t in &tensors {
                assert_eq!(&t.shape()[1..], tail, "concat axis 0: trailing dims differ");
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = tensors[0].shape().to_vec();
            shape[0] = rows;
            Tensor::new(shape, data)
        }
        1 => {
            let rows = tensors[0].shape()[0];
            let mut cols = 0;
            for t in &tensors {
                assert_eq!(t.rank(), 2, "concat axis 1 requires rank 2");
                assert_eq!(t.shape()[0], rows, "concat axis 1: row counts differ");
                cols += t.shape()[1];
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for t in &tensors {
                    let c = t.shape()[1];
                    data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
            Tensor::new(vec![rows, cols], data)
        }
        _ => panic!("concat supports axes 0 and 1, got {axis}"),
    };
    let needs = values.iter().any(|v| graph.needs(v.id));
    graph.push(
        out,
        Op::Concat { axis, inputs: values.iter().map(|v| v.id).collect() },
        needs,
        "concat",
    )
}
