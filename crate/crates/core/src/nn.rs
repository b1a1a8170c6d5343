//! Layers assembled from graph primitives.
//!
//! Each layer comes as a pair: `init_*` registers its parameters under a
//! dotted name prefix, and `*_fw` builds the forward pass from the bound
//! values. Keeping both in one place pins the naming convention.
//!
//! Layers are pure compositions of [`crate::graph`] primitives, so their
//! backward passes come from the engine and are covered by the
//! finite-difference suite.

use rand_chacha::ChaCha8Rng;

use crate::graph::{concat, Graph, Value};
use crate::params::{glorot, uniform, BoundParams, ParameterSet};
use crate::tensor::Tensor;

/// Additive pre-softmax penalty for masked attention slots.
pub const MASK_BIAS: f64 = -1e30;
/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

pub fn init_linear(ps: &mut ParameterSet, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) {
    ps.insert(format!("{name}.w"), glorot(rng, din, dout));
    ps.insert(format!("{name}.b"), Tensor::zeros(vec![dout]));
}

/// `x @ w + b` with the bias broadcast across rows.
pub fn linear_fw<'g>(p: &BoundParams<'g>, name: &str, x: Value<'g>) -> Value<'g> {
    x.matmul(p.get(&format!("{name}.w"))).add(p.get(&format!("{name}.b")))
}

// ---------------------------------------------------------------------------
// 1-D convolution with same-length output
// ---------------------------------------------------------------------------

pub fn init_conv1d(
    ps: &mut ParameterSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    kernel: usize,
    din: usize,
    dout: usize,
) {
    assert!(kernel % 2 == 1, "even kernel size {kernel} rejected");
    let limit = (6.0 / (kernel * din + dout) as f64).sqrt();
    ps.insert(format!("{name}.w"), uniform(rng, vec![kernel, din, dout], limit));
    ps.insert(format!("{name}.b"), Tensor::zeros(vec![dout]));
}

/// Non-causal 1-D convolution over the sequence axis with symmetric zero
/// padding of `(k-1)/2`, so a `[T, din]` input yields `[T, dout]`.
///
/// `w` has shape `[k, din, dout]`; even kernel sizes panic.
pub fn conv1d_same_fw<'g>(p: &BoundParams<'g>, name: &str, x: Value<'g>) -> Value<'g> {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    conv1d_same(x, w, b)
}

pub fn conv1d_same<'g>(x: Value<'g>, w: Value<'g>, b: Value<'g>) -> Value<'g> {
    let w_shape = w.shape();
    assert_eq!(w_shape.len(), 3, "conv weight must be [k, din, dout]");
    let (k, din, dout) = (w_shape[0], w_shape[1], w_shape[2]);
    assert!(k % 2 == 1, "even kernel size {k} rejected");
    let x_shape = x.shape();
    assert_eq!(x_shape[1], din, "conv input dim {} != weight din {din}", x_shape[1]);
    let t = x_shape[0];
    let pad = (k - 1) / 2;
    let g = x.graph();

    let mut acc: Option<Value<'g>> = None;
    for tap in 0..k {
        // Output row t reads input row t + tap - pad.
        let off = tap as isize - pad as isize;
        let shifted = shift_rows(g, x, t, din, off);
        let w_tap = w.slice_rows(tap, 1).reshape(vec![din, dout]);
        let term = shifted.matmul(w_tap);
        acc = Some(match acc {
            Some(a) => a.add(term),
            None => term,
        });
    }
    acc.expect("kernel size >= 1").add(b)
}

/// Rows shifted by `off` with zero fill: row `t` of the result is row
/// `t + off` of `x` when in range, zero otherwise.
fn shift_rows<'g>(g: &'g Graph, x: Value<'g>, t: usize, d: usize, off: isize) -> Value<'g> {
    if off == 0 {
        return x;
    }
    let n = off.unsigned_abs();
    if n >= t {
        return g.constant(Tensor::zeros(vec![t, d]));
    }
    let zeros = g.constant(Tensor::zeros(vec![n, d]));
    if off > 0 {
        concat(&[x.slice_rows(n, t - n), zeros], 0)
    } else {
        concat(&[zeros, x.slice_rows(0, t - n)], 0)
    }
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

const GATES: [&str; 3] = ["z", "r", "n"];

pub fn init_gru_bidirectional(
    ps: &mut ParameterSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    input_dim: usize,
    hidden: usize,
    layers: usize,
) {
    let limit = 1.0 / (hidden as f64).sqrt();
    for layer in 0..layers {
        let din = if layer == 0 { input_dim } else { 2 * hidden };
        for dir in ["fw", "bw"] {
            for gate in GATES {
                let base = format!("{name}.layer{layer}.{dir}");
                ps.insert(format!("{base}.w_ih_{gate}"), uniform(rng, vec![din, hidden], limit));
                ps.insert(format!("{base}.w_hh_{gate}"), uniform(rng, vec![hidden, hidden], limit));
                ps.insert(format!("{base}.b_{gate}"), Tensor::zeros(vec![hidden]));
            }
        }
    }
}

/// One GRU step with the reset-before-candidate gate equations:
///
/// ```text
/// z  = sigmoid(W_z [x, h] + b_z)
/// r  = sigmoid(W_r [x, h] + b_r)
/// n  = tanh(W_n [x, r * h] + b_n)
/// h' = (1 - z) * n + z * h
/// ```
///
/// Weights arrive split into input (`w_ih_*`) and hidden (`w_hh_*`) blocks,
/// which is algebraically identical to the concatenated form.
#[allow(clippy::too_many_arguments)]
pub fn gru_cell<'g>(
    x: Value<'g>,
    h: Value<'g>,
    w_ih_z: Value<'g>,
    w_hh_z: Value<'g>,
    b_z: Value<'g>,
    w_ih_r: Value<'g>,
    w_hh_r: Value<'g>,
    b_r: Value<'g>,
    w_ih_n: Value<'g>,
    w_hh_n: Value<'g>,
    b_n: Value<'g>,
) -> Value<'g> {
    let z = x.matmul(w_ih_z).add(h.matmul(w_hh_z)).add(b_z).sigmoid();
    let r = x.matmul(w_ih_r).add(h.matmul(w_hh_r)).add(b_r).sigmoid();
    let n = x.matmul(w_ih_n).add(r.mul(h).matmul(w_hh_n)).add(b_n).tanh();
    z.affine(-1.0, 1.0).mul(n).add(z.mul(h))
}

fn gru_direction<'g>(
    p: &BoundParams<'g>,
    base: &str,
    x: Value<'g>,
    hidden: usize,
    mask: &[bool],
    reverse: bool,
) -> Vec<Value<'g>> {
    let g = x.graph();
    let t = x.shape()[0];
    assert_eq!(mask.len(), t, "mask length != sequence length");
    let w_ih_z = p.get(&format!("{base}.w_ih_z"));
    let w_hh_z = p.get(&format!("{base}.w_hh_z"));
    let b_z = p.get(&format!("{base}.b_z"));
    let w_ih_r = p.get(&format!("{base}.w_ih_r"));
    let w_hh_r = p.get(&format!("{base}.w_hh_r"));
    let b_r = p.get(&format!("{base}.b_r"));
    let w_ih_n = p.get(&format!("{base}.w_ih_n"));
    let w_hh_n = p.get(&format!("{base}.w_hh_n"));
    let b_n = p.get(&format!("{base}.b_n"));

    let mut h = g.constant(Tensor::zeros(vec![1, hidden]));
    let mut out: Vec<Option<Value<'g>>> = vec![None; t];
    let steps: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for step in steps {
        // Padded steps carry the hidden state through unchanged, so no
        // information flows from padding into valid positions.
        if mask[step] {
            let x_t = x.slice_rows(step, 1);
            h = gru_cell(x_t, h, w_ih_z, w_hh_z, b_z, w_ih_r, w_hh_r, b_r, w_ih_n, w_hh_n, b_n);
        }
        out[step] = Some(h);
    }
    out.into_iter().map(|v| v.expect("all steps visited")).collect()
}

/// Stacked bidirectional GRU: `[T, input_dim] -> [T, 2 * hidden]`, with
/// per-timestep forward/backward halves concatenated and layer `l+1`
/// consuming layer `l`'s output. Initial hidden states are zero.
pub fn gru_bidirectional_fw<'g>(
    p: &BoundParams<'g>,
    name: &str,
    x: Value<'g>,
    hidden: usize,
    layers: usize,
    mask: &[bool],
) -> Value<'g> {
    let mut inp = x;
    for layer in 0..layers {
        let fw = gru_direction(p, &format!("{name}.layer{layer}.fw"), inp, hidden, mask, false);
        let bw = gru_direction(p, &format!("{name}.layer{layer}.bw"), inp, hidden, mask, true);
        let rows: Vec<Value<'g>> = fw
            .into_iter()
            .zip(bw)
            .map(|(f, b)| concat(&[f, b], 1))
            .collect();
        inp = concat(&rows, 0);
    }
    inp
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

pub fn init_mha(ps: &mut ParameterSet, rng: &mut ChaCha8Rng, name: &str, dim: usize) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(ps, rng, &format!("{name}.w{proj}"), dim, dim);
    }
}

/// Scaled dot-product multi-head attention.
///
/// Queries, keys, and values are projected with learned `dim x dim` maps,
/// split into `heads` slices of width `dim / heads`, attended per head with
/// a `1/sqrt(dim/heads)` scale, concatenated, and output-projected.
/// `mask_bias`, when present, is added to every head's pre-softmax scores;
/// masked slots carry [`MASK_BIAS`].
pub fn mha_fw<'g>(
    p: &BoundParams<'g>,
    name: &str,
    q_in: Value<'g>,
    k_in: Value<'g>,
    v_in: Value<'g>,
    heads: usize,
    mask_bias: Option<Value<'g>>,
) -> Value<'g> {
    let dim = q_in.shape()[1];
    assert!(dim % heads == 0, "model dim {dim} not divisible by {heads} heads");
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear_fw(p, &format!("{name}.wq"), q_in);
    let k = linear_fw(p, &format!("{name}.wk"), k_in);
    let v = linear_fw(p, &format!("{name}.wv"), v_in);

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh);
        let kh = k.slice_cols(h * dh, dh);
        let vh = v.slice_cols(h * dh, dh);
        let mut scores = qh.matmul(kh.t()).scale(scale);
        if let Some(bias) = mask_bias {
            scores = scores.add(bias);
        }
        head_outs.push(scores.softmax().matmul(vh));
    }
    linear_fw(p, &format!("{name}.wo"), concat(&head_outs, 1))
}

/// `[t_q, t_k]` additive bias: 0 where the key is valid, [`MASK_BIAS`]
/// where it is padding.
pub fn attention_mask_bias<'g>(g: &'g Graph, t_q: usize, key_valid: &[bool]) -> Value<'g> {
    let t_k = key_valid.len();
    let mut data = vec![0.0; t_q * t_k];
    for row in 0..t_q {
        for (col, &ok) in key_valid.iter().enumerate() {
            if !ok {
                data[row * t_k + col] = MASK_BIAS;
            }
        }
    }
    g.constant(Tensor::new(vec![t_q, t_k], data))
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

pub fn init_layer_norm(ps: &mut ParameterSet, name: &str, dim: usize) {
    ps.insert(format!("{name}.g"), Tensor::ones(vec![dim]));
    ps.insert(format!("{name}.b"), Tensor::zeros(vec![dim]));
}

pub fn layer_norm_fw<'g>(p: &BoundParams<'g>, name: &str, x: Value<'g>) -> Value<'g> {
    layer_norm(x, p.get(&format!("{name}.g")), p.get(&format!("{name}.b")))
}

/// Row-wise normalization over the last axis with learned gain and shift.
pub fn layer_norm<'g>(x: Value<'g>, gamma: Value<'g>, beta: Value<'g>) -> Value<'g> {
    let mean = x.mean_last_keep();
    let centered = x.sub(mean);
    let var = centered.mul(centered).mean_last_keep();
    let inv_std = var.affine(1.0, LAYER_NORM_EPS).powf(-0.5);
    centered.mul(inv_std).mul(gamma).add(beta)
}

// ---------------------------------------------------------------------------
// Misc
// ---------------------------------------------------------------------------

/// Rows scaled to unit Euclidean norm. Callers must reject zero rows first.
pub fn l2_normalize_rows(x: Value<'_>) -> Value<'_> {
    let norm = x.mul(x).sum_last_keep().powf(0.5);
    x.div(norm)
}

/// Constant `[n, classes]` one-hot encoding of labels.
pub fn one_hot<'g>(g: &'g Graph, labels: &[usize], classes: usize) -> Value<'g> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &label) in labels.iter().enumerate() {
        assert!(label < classes, "label {label} out of range for {classes} classes");
        data[i * classes + label] = 1.0;
    }
    g.constant(Tensor::new(vec![labels.len(), classes], data))
}

/// Constant `[n, 1]` column of 0/1 validity flags.
pub fn mask_column<'g>(g: &'g Graph, mask: &[bool]) -> Value<'g> {
    let data = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    g.constant(Tensor::new(vec![mask.len(), 1], data))
}
