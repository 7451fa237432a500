//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records primitive applications in execution order, so every
//! node's parents precede it. Applications whose inputs all have
//! `requires_grad == false` are stored as plain values and not recorded,
//! which makes inference on frozen parameters tape-free.

use std::cell::RefCell;

use super::tensor::{broadcast_offsets, broadcast_shape, pad_left, split_axis, strides, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Conv { x: usize, w: usize, dilation: usize },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Abs(usize),
    Softplus(usize),
    Softmax(usize, usize),
    Concat(Vec<usize>, usize),
    Slice { x: usize, axis: usize, start: usize },
    IndexSelect { x: usize, axis: usize, indices: Vec<usize> },
    Sum(usize, usize),
    Mean(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
}

#[cfg(test)]
impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Conv { x, w, .. } => vec![*x, *w],
            Op::Concat(xs, _) => xs.clone(),
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Abs(a)
            | Op::Softplus(a)
            | Op::Softmax(a, _)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Reshape(a)
            | Op::Permute(a, _) => vec![*a],
            Op::Slice { x, .. } | Op::IndexSelect { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Computation record for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to a value on a [`Tape`].
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

/// Gradients of a scalar loss with respect to every leaf that requires grad.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zeros if it did not participate in the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of primitive applications recorded for differentiation.
    pub fn recorded_ops(&self) -> usize {
        self.inner
            .borrow()
            .nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Clears the tape so it can be reused for a new pass.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.backward_done = false;
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        inner.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn requires_grad(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    /// Backpropagates from a scalar loss. Gradients from multiple paths sum.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(Error::Tape(
                "backward called twice on the same tape without reset".into(),
            ));
        }
        if inner.nodes.is_empty() {
            return Err(Error::Tape("backward on an empty tape".into()));
        }
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                inner.nodes[loss.id].value.shape()
            )));
        }
        inner.backward_done = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(nodes, id, &g, &mut grads);
            // keep nothing for interior nodes
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad, g) {
                (Op::Leaf, true, Some(g)) => {
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Sum a gradient of shape `out` down to the broadcast source shape `inp`.
fn reduce_broadcast(g: &[f64], out: &[usize], inp: &[usize]) -> Vec<f64> {
    let n: usize = inp.iter().product();
    if out == inp {
        return g.to_vec();
    }
    let offs = broadcast_offsets(out, inp);
    let mut r = vec![0.0; n];
    for (gi, &o) in g.iter().zip(&offs) {
        r[o] += gi;
    }
    r
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            accumulate(grads, nodes, *a, reduce_broadcast(g, out.shape(), sa));
            accumulate(grads, nodes, *b, reduce_broadcast(g, out.shape(), sb));
        }
        Op::Sub(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            accumulate(grads, nodes, *a, reduce_broadcast(g, out.shape(), sa));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(grads, nodes, *b, reduce_broadcast(&neg, out.shape(), sb));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let oa = broadcast_offsets(out.shape(), va.shape());
            let ob = broadcast_offsets(out.shape(), vb.shape());
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; va.len()];
                for i in 0..g.len() {
                    ga[oa[i]] += g[i] * vb.data()[ob[i]];
                }
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; vb.len()];
                for i in 0..g.len() {
                    gb[ob[i]] += g[i] * va.data()[oa[i]];
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, g.iter().map(|v| v * c).collect());
        }
        Op::MatMul(a, b) => {
            let (ga, gb) = matmul_backward(&nodes[*a].value, &nodes[*b].value, out.shape(), g);
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Conv { x, w, dilation } => {
            let (gx, gw) = conv_backward(&nodes[*x].value, &nodes[*w].value, *dilation, g);
            if nodes[*x].requires_grad {
                accumulate(grads, nodes, *x, gx);
            }
            if nodes[*w].requires_grad {
                accumulate(grads, nodes, *w, gw);
            }
        }
        Op::Sigmoid(a) => {
            let d = out.data().iter().zip(g).map(|(y, gi)| gi * y * (1.0 - y)).collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Tanh(a) => {
            let d = out.data().iter().zip(g).map(|(y, gi)| gi * (1.0 - y * y)).collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Relu(a) => {
            let x = nodes[*a].value.data();
            let d = x.iter().zip(g).map(|(x, gi)| if *x > 0.0 { *gi } else { 0.0 }).collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::LeakyRelu(a, slope) => {
            let x = nodes[*a].value.data();
            let d = x
                .iter()
                .zip(g)
                .map(|(x, gi)| if *x > 0.0 { *gi } else { gi * slope })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Abs(a) => {
            let x = nodes[*a].value.data();
            let d = x
                .iter()
                .zip(g)
                .map(|(x, gi)| {
                    if *x > 0.0 {
                        *gi
                    } else if *x < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Softplus(a) => {
            let x = nodes[*a].value.data();
            let d = x.iter().zip(g).map(|(x, gi)| gi * sigmoid(*x)).collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len).map(|j| y[base + j * inner] * g[base + j * inner]).sum();
                    for j in 0..len {
                        let k = base + j * inner;
                        d[k] = y[k] * (g[k] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                if nodes[p].requires_grad {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = o * total * inner + offset * inner;
                        d.extend_from_slice(&g[start..start + len * inner]);
                    }
                    accumulate(grads, nodes, p, d);
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let src = nodes[*x].value.shape();
            let (outer, total, inner) = split_axis(src, *axis);
            let len = out.shape()[*axis];
            let mut d = vec![0.0; nodes[*x].value.len()];
            for o in 0..outer {
                let dst = o * total * inner + start * inner;
                let from = o * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&g[from..from + len * inner]);
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::IndexSelect { x, axis, indices } => {
            let src = nodes[*x].value.shape();
            let (outer, total, inner) = split_axis(src, *axis);
            let mut d = vec![0.0; nodes[*x].value.len()];
            for o in 0..outer {
                for (j, &idx) in indices.iter().enumerate() {
                    let dst = o * total * inner + idx * inner;
                    let from = (o * indices.len() + j) * inner;
                    for k in 0..inner {
                        d[dst + k] += g[from + k];
                    }
                }
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let src = nodes[*a].value.shape();
            let (outer, len, inner) = split_axis(src, *axis);
            let scale = if matches!(nodes[id].op, Op::Mean(..)) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut d = vec![0.0; nodes[*a].value.len()];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        d[(o * len + j) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::SumAll(a) => {
            accumulate(grads, nodes, *a, vec![g[0]; nodes[*a].value.len()]);
        }
        Op::MeanAll(a) => {
            let n = nodes[*a].value.len();
            accumulate(grads, nodes, *a, vec![g[0] / n as f64; n]);
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::Permute(a, axes) => {
            let src = nodes[*a].value.shape();
            let offs = permute_offsets(src, axes);
            let mut d = vec![0.0; g.len()];
            for (gi, &o) in g.iter().zip(&offs) {
                d[o] = *gi;
            }
            accumulate(grads, nodes, *a, d);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// For each linear index of the permuted output, the source linear index.
fn permute_offsets(src: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides(src);
    let out_shape: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n: usize = src.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0;
    let mut res = Vec::with_capacity(n);
    for _ in 0..n {
        res.push(offset);
        for axis in (0..out_shape.len()).rev() {
            idx[axis] += 1;
            offset += eff[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= eff[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    res
}

struct MatMulPlan {
    n: usize,
    k: usize,
    m: usize,
    out_shape: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let rank = a.len().max(b.len());
    let pa = pad_left(a, rank);
    let pb = pad_left(b, rank);
    let (n, k) = (pa[rank - 2], pa[rank - 1]);
    let (k2, m) = (pb[rank - 2], pb[rank - 1]);
    if k != k2 {
        return Err(err());
    }
    let batch = broadcast_shape("matmul", &pa[..rank - 2], &pb[..rank - 2]).map_err(|_| err())?;
    let a_batch = broadcast_offsets(&batch, &pa[..rank - 2]);
    let b_batch = broadcast_offsets(&batch, &pb[..rank - 2]);
    let mut out_shape = batch;
    out_shape.extend([n, m]);
    Ok(MatMulPlan {
        n,
        k,
        m,
        out_shape,
        a_batch,
        b_batch,
    })
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let p = matmul_plan(a.shape(), b.shape())?;
    let (n, k, m) = (p.n, p.k, p.m);
    let mut out = vec![0.0; p.a_batch.len() * n * m];
    for (ob, (&ai, &bi)) in p.a_batch.iter().zip(&p.b_batch).enumerate() {
        let ad = &a.data()[ai * n * k..(ai + 1) * n * k];
        let bd = &b.data()[bi * k * m..(bi + 1) * k * m];
        let od = &mut out[ob * n * m..(ob + 1) * n * m];
        for i in 0..n {
            let orow = &mut od[i * m..(i + 1) * m];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * m..(p + 1) * m];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(p.out_shape, out))
}

fn matmul_backward(a: &Tensor, b: &Tensor, _out: &[usize], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = matmul_plan(a.shape(), b.shape()).expect("validated in forward");
    let (n, k, m) = (p.n, p.k, p.m);
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for (ob, (&ai, &bi)) in p.a_batch.iter().zip(&p.b_batch).enumerate() {
        let ad = &a.data()[ai * n * k..(ai + 1) * n * k];
        let bd = &b.data()[bi * k * m..(bi + 1) * k * m];
        let gd = &g[ob * n * m..(ob + 1) * n * m];
        let gad = &mut ga[ai * n * k..(ai + 1) * n * k];
        for i in 0..n {
            let grow = &gd[i * m..(i + 1) * m];
            for p in 0..k {
                let brow = &bd[p * m..(p + 1) * m];
                gad[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        let gbd = &mut gb[bi * k * m..(bi + 1) * k * m];
        for i in 0..n {
            let grow = &gd[i * m..(i + 1) * m];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, gv) in gbd[p * m..(p + 1) * m].iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
    (ga, gb)
}

fn conv_dims(x: &[usize], w: &[usize], dilation: usize) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let err = || Error::Shape {
        op: "dilated_causal_conv1d",
        lhs: x.to_vec(),
        rhs: w.to_vec(),
    };
    if x.len() != 4 || w.len() != 3 || x[1] != w[1] || dilation == 0 {
        return Err(err());
    }
    let (b, c, n, t) = (x[0], x[1], x[2], x[3]);
    let (o, ks) = (w[0], w[2]);
    let span = dilation * (ks - 1);
    if span >= t {
        return Err(err());
    }
    Ok((b, c, n, t, o, ks, t - span))
}

/// Valid (unpadded) dilated causal convolution along the last axis.
/// `x`: [B, C, N, T], `w`: [O, C, k] → [B, O, N, T - dilation·(k-1)].
/// Tap `j` reads `x[.., t + j·dilation]`, so tap `k-1` is the most recent step.
///
/// Each (batch, out-channel) pair is accumulated over the flat `N·T` block,
/// then the valid `to` steps of every node are kept.
fn conv_forward(x: &Tensor, w: &Tensor, dilation: usize) -> Result<Tensor> {
    let (b, c, n, t, o, ks, to) = conv_dims(x.shape(), w.shape(), dilation)?;
    let xd = x.data();
    let wd = w.data();
    let len = n * t;
    let mut out = vec![0.0; b * o * n * to];
    let mut full = vec![0.0; len];
    for bi in 0..b {
        for oi in 0..o {
            full.iter_mut().for_each(|v| *v = 0.0);
            for ci in 0..c {
                let xb = &xd[(bi * c + ci) * len..(bi * c + ci + 1) * len];
                for j in 0..ks {
                    let wv = wd[(oi * c + ci) * ks + j];
                    let shift = j * dilation;
                    for (f, xv) in full[..len - shift].iter_mut().zip(&xb[shift..]) {
                        *f += wv * xv;
                    }
                }
            }
            let obase = (bi * o + oi) * n * to;
            for ni in 0..n {
                out[obase + ni * to..obase + (ni + 1) * to].copy_from_slice(&full[ni * t..ni * t + to]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, o, n, to], out))
}

fn conv_backward(x: &Tensor, w: &Tensor, dilation: usize, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (b, c, n, t, o, ks, to) = conv_dims(x.shape(), w.shape(), dilation).expect("validated");
    let xd = x.data();
    let wd = w.data();
    let len = n * t;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    // output gradient laid out on the input grid, zero past each node's valid steps
    let mut gfull = vec![0.0; len];
    for bi in 0..b {
        for oi in 0..o {
            let obase = (bi * o + oi) * n * to;
            for ni in 0..n {
                gfull[ni * t..ni * t + to].copy_from_slice(&g[obase + ni * to..obase + (ni + 1) * to]);
            }
            for ci in 0..c {
                let range = (bi * c + ci) * len..(bi * c + ci + 1) * len;
                let xb = &xd[range.clone()];
                let gxb = &mut gx[range];
                for j in 0..ks {
                    let widx = (oi * c + ci) * ks + j;
                    let wv = wd[widx];
                    let shift = j * dilation;
                    let gs = &gfull[..len - shift];
                    gw[widx] += gs.iter().zip(&xb[shift..]).map(|(a, b)| a * b).sum::<f64>();
                    for (gxv, gv) in gxb[shift..].iter_mut().zip(gs) {
                        *gxv += wv * gv;
                    }
                }
            }
        }
    }
    (gx, gw)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn unary(self, op: Op, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let value = f(&self.tape.inner.borrow().nodes[self.id].value)?;
        let rg = self.tape.requires_grad(&[self.id]);
        Ok(self.tape.push(value, rg, op))
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        self.unary(op, |t| {
            Ok(Tensor::from_parts(
                t.shape().to_vec(),
                t.data().iter().map(|&v| f(v)).collect(),
            ))
        })
        .expect("elementwise map cannot fail")
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            if a.shape() == b.shape() {
                Tensor::from_parts(
                    a.shape().to_vec(),
                    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
                )
            } else {
                let shape = broadcast_shape(name, a.shape(), b.shape())?;
                let oa = broadcast_offsets(&shape, a.shape());
                let ob = broadcast_offsets(&shape, b.shape());
                let data = oa
                    .iter()
                    .zip(&ob)
                    .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
                    .collect();
                Tensor::from_parts(shape, data)
            }
        };
        let rg = self.tape.requires_grad(&[self.id, other.id]);
        Ok(self.tape.push(value, rg, op))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map(Op::Scale(self.id, c), |v| v * c)
    }

    /// Batched matrix product over the last two axes, broadcasting batch axes.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let inner = self.tape.inner.borrow();
            matmul_forward(&inner.nodes[self.id].value, &inner.nodes[other.id].value)?
        };
        let rg = self.tape.requires_grad(&[self.id, other.id]);
        Ok(self.tape.push(value, rg, Op::MatMul(self.id, other.id)))
    }

    /// See [`conv_forward`] for the layout and boundary convention.
    pub fn dilated_causal_conv1d(self, weight: Var<'t>, dilation: usize) -> Result<Var<'t>> {
        let value = {
            let inner = self.tape.inner.borrow();
            conv_forward(&inner.nodes[self.id].value, &inner.nodes[weight.id].value, dilation)?
        };
        let rg = self.tape.requires_grad(&[self.id, weight.id]);
        let op = Op::Conv {
            x: self.id,
            w: weight.id,
            dilation,
        };
        Ok(self.tape.push(value, rg, op))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.map(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.map(Op::LeakyRelu(self.id, slope), move |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn abs(self) -> Var<'t> {
        self.map(Op::Abs(self.id), f64::abs)
    }

    pub fn softplus(self) -> Var<'t> {
        self.map(Op::Softplus(self.id), softplus)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.unary(Op::Softmax(self.id, axis), |t| {
            check_axis("softmax", t.shape(), axis)?;
            let (outer, len, inner) = split_axis(t.shape(), axis);
            let x = t.data();
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let max = (0..len).map(|j| x[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for j in 0..len {
                        let e = (x[base + j * inner] - max).exp();
                        y[base + j * inner] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        y[base + j * inner] /= sum;
                    }
                }
            }
            Ok(Tensor::from_parts(t.shape().to_vec(), y))
        })
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| Error::Tape("concat of zero tensors".into()))?
            .tape;
        let value = {
            let inner = tape.inner.borrow();
            let first = inner.nodes[parts[0].id].value.shape().to_vec();
            check_axis("concat", &first, axis)?;
            let mut total = 0;
            for p in parts {
                let s = inner.nodes[p.id].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::Shape {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner_sz) = split_axis(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &inner.nodes[p.id].value;
                    let chunk = v.shape()[axis] * inner_sz;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires_grad(&ids);
        Ok(tape.push(value, rg, Op::Concat(ids, axis)))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            |t| {
                check_axis("slice", t.shape(), axis)?;
                if len == 0 || start + len > t.shape()[axis] {
                    return Err(Error::Shape {
                        op: "slice",
                        lhs: t.shape().to_vec(),
                        rhs: vec![axis, start, len],
                    });
                }
                let (outer, total, inner) = split_axis(t.shape(), axis);
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let s = o * total * inner + start * inner;
                    data.extend_from_slice(&t.data()[s..s + len * inner]);
                }
                let mut shape = t.shape().to_vec();
                shape[axis] = len;
                Ok(Tensor::from_parts(shape, data))
            },
        )
    }

    /// Last `len` entries along `axis`.
    pub fn tail(self, axis: usize, len: usize) -> Result<Var<'t>> {
        let n = self.shape()[axis];
        if len > n {
            return Err(Error::Shape {
                op: "tail",
                lhs: self.shape(),
                rhs: vec![axis, len],
            });
        }
        if len == n {
            return Ok(self);
        }
        self.slice(axis, n - len, len)
    }

    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        self.unary(
            Op::IndexSelect {
                x: self.id,
                axis,
                indices: indices.to_vec(),
            },
            |t| {
                check_axis("index_select", t.shape(), axis)?;
                let (outer, total, inner) = split_axis(t.shape(), axis);
                if indices.is_empty() || indices.iter().any(|&i| i >= total) {
                    return Err(Error::Shape {
                        op: "index_select",
                        lhs: t.shape().to_vec(),
                        rhs: indices.to_vec(),
                    });
                }
                let mut data = Vec::with_capacity(outer * indices.len() * inner);
                for o in 0..outer {
                    for &i in indices {
                        let s = o * total * inner + i * inner;
                        data.extend_from_slice(&t.data()[s..s + inner]);
                    }
                }
                let mut shape = t.shape().to_vec();
                shape[axis] = indices.len();
                Ok(Tensor::from_parts(shape, data))
            },
        )
    }

    fn reduce_axis(self, op: Op, axis: usize, mean: bool) -> Result<Var<'t>> {
        self.unary(op, |t| {
            check_axis("sum", t.shape(), axis)?;
            let (outer, len, inner) = split_axis(t.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += t.data()[(o * len + j) * inner + i];
                    }
                }
            }
            if mean {
                data.iter_mut().for_each(|v| *v /= len as f64);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = 1;
            Ok(Tensor::from_parts(shape, data))
        })
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(Op::Sum(self.id, axis), axis, false)
    }

    /// Mean along `axis`, keeping it with size 1.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(Op::Mean(self.id, axis), axis, true)
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::SumAll(self.id), |t| Ok(Tensor::scalar(t.data().iter().sum())))
            .expect("sum cannot fail")
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::MeanAll(self.id), |t| {
            Ok(Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64))
        })
        .expect("mean cannot fail")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Reshape(self.id), |t| t.clone().reshape(shape))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Permute(self.id, axes.to_vec()), |t| {
            let mut seen = vec![false; t.rank()];
            let valid = axes.len() == t.rank()
                && axes.iter().all(|&a| a < t.rank() && !std::mem::replace(&mut seen[a], true));
            if !valid {
                return Err(Error::Shape {
                    op: "permute",
                    lhs: t.shape().to_vec(),
                    rhs: axes.to_vec(),
                });
            }
            let offs = permute_offsets(t.shape(), axes);
            let data = offs.iter().map(|&o| t.data()[o]).collect();
            let shape = axes.iter().map(|&a| t.shape()[a]).collect();
            Ok(Tensor::from_parts(shape, data))
        })
    }
}
