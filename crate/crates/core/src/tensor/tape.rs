//! Define-by-run gradient tape.
//!
//! Every op appends a node holding its forward value and whatever the backward
//! rule needs. Node ids grow with creation time, so the tape is topologically
//! ordered and [`Tape::backward`] is a single reverse sweep.

use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{self, Conv1dGeom, Conv2dGeom};
use super::{window_out_len, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    Gelu(usize),
    Softmax { x: usize, axis: usize },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaxPool1d { x: usize, argmax: Vec<usize> },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        geo: Conv1dGeom,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geo: Conv2dGeom,
    },
    Mean { x: usize, map: Vec<usize>, count: usize },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        targets: Vec<usize>,
        smoothing: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::AddBias(x, b) => vec![*x, *b],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Gelu(x)
            | Op::Sum(x)
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Softmax { x, .. }
            | Op::MaxPool1d { x, .. }
            | Op::Mean { x, .. } => vec![*x],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv1d { x, w, b, .. } | Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input tensor. Gradients are kept only when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Accumulated gradient of `var`, present once a backward pass has reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_op(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, requires_grad)
    }

    /// Reverse sweep from a one-element `loss`, adding into the stored gradients.
    ///
    /// Calling it twice without [`Tape::zero_grad`] accumulates.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(self, loss.tape), "loss belongs to another tape");
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        adj[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut adj);
            match &mut nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Zero-initialised adjoint slot for `id`, or `None` when it needs no gradient.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut [f64]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(adj[id].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn add_into(nodes: &[Node], adj: &mut [Option<Vec<f64>>], id: usize, g: &[f64], sign: f64) {
    if let Some(s) = slot(nodes, adj, id) {
        s.iter_mut().zip(g).for_each(|(a, b)| *a += sign * b);
    }
}

/// Three distinct adjoint slots at once; `a`, `b`, `c` must be distinct.
fn slots3<'a>(
    nodes: &[Node],
    adj: &'a mut [Option<Vec<f64>>],
    a: usize,
    b: usize,
    c: usize,
) -> (
    Option<&'a mut [f64]>,
    Option<&'a mut [f64]>,
    Option<&'a mut [f64]>,
) {
    for &i in &[a, b, c] {
        let _ = slot(nodes, adj, i);
    }
    let mut out: [Option<&'a mut [f64]>; 3] = [None, None, None];
    let order = [a, b, c];
    for (i, entry) in adj.iter_mut().enumerate() {
        if let Some(pos) = order.iter().position(|&x| x == i) {
            if nodes[i].requires_grad {
                out[pos] = entry.as_mut().map(|v| v.as_mut_slice());
            }
        }
    }
    let [x, y, z] = out;
    (x, y, z)
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(nodes, adj, *a, g, 1.0);
            add_into(nodes, adj, *b, g, 1.0);
        }
        Op::Sub(a, b) => {
            add_into(nodes, adj, *a, g, 1.0);
            add_into(nodes, adj, *b, g, -1.0);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data.clone(), val(*b).data.clone());
            if let Some(s) = slot(nodes, adj, *a) {
                for i in 0..g.len() {
                    s[i] += g[i] * bv[i];
                }
            }
            if let Some(s) = slot(nodes, adj, *b) {
                for i in 0..g.len() {
                    s[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(s) = slot(nodes, adj, *a) {
                s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::AddBias(x, b) => {
            add_into(nodes, adj, *x, g, 1.0);
            let n = val(*b).numel();
            if let Some(s) = slot(nodes, adj, *b) {
                for (i, gv) in g.iter().enumerate() {
                    s[i % n] += gv;
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
            let n = val(*b).shape[1];
            if a == b {
                let mut tmp = vec![0.0; m * k];
                let mut tmp2 = vec![0.0; m * k];
                kernels::matmul_backward(
                    &val(*a).data,
                    &val(*b).data,
                    g,
                    m,
                    k,
                    n,
                    Some(&mut tmp),
                    Some(&mut tmp2),
                );
                tmp.iter_mut().zip(&tmp2).for_each(|(x, y)| *x += y);
                add_into(nodes, adj, *a, &tmp, 1.0);
            } else {
                let (ga, gb) = two_slots(nodes, adj, *a, *b);
                kernels::matmul_backward(&val(*a).data, &val(*b).data, g, m, k, n, ga, gb);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (val(*a).shape[0], val(*a).shape[1]);
            // g has shape [n × m]
            let gt = kernels::transpose(g, n, m);
            add_into(nodes, adj, *a, &gt, 1.0);
        }
        Op::Reshape(a) => add_into(nodes, adj, *a, g, 1.0),
        Op::SliceCols { x, start } => {
            let cols = val(*x).shape[1];
            let width = nodes[id].value.shape[1];
            if let Some(s) = slot(nodes, adj, *x) {
                for (r, grow) in g.chunks(width).enumerate() {
                    for (j, gv) in grow.iter().enumerate() {
                        s[r * cols + start + j] += gv;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = nodes[id].value.shape[1];
            let mut offset = 0;
            for &p in parts {
                let width = val(p).shape[1];
                if let Some(s) = slot(nodes, adj, p) {
                    for (r, srow) in s.chunks_mut(width).enumerate() {
                        for (j, sv) in srow.iter_mut().enumerate() {
                            *sv += g[r * total + offset + j];
                        }
                    }
                }
                offset += width;
            }
        }
        Op::SliceRows { x, start } => {
            let cols = val(*x).shape[1];
            if let Some(s) = slot(nodes, adj, *x) {
                let off = start * cols;
                s[off..off + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                add_into(nodes, adj, p, &g[offset..offset + n], 1.0);
                offset += n;
            }
        }
        Op::Gelu(a) => {
            let av = val(*a).data.clone();
            if let Some(s) = slot(nodes, adj, *a) {
                for i in 0..g.len() {
                    s[i] += g[i] * kernels::gelu_grad(av[i]);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = &nodes[id].value;
            let (yd, shape) = (y.data.clone(), y.shape.clone());
            if let Some(s) = slot(nodes, adj, *x) {
                kernels::softmax_backward(&yd, g, &shape, *axis, s);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gain_v = val(*gain).data.clone();
            let n = gain_v.len();
            let (gx, gg, gb) = slots3(nodes, adj, *x, *gain, *bias);
            kernels::layer_norm_backward(g, xhat, rstd, &gain_v, n, gx, gg, gb);
        }
        Op::MaxPool1d { x, argmax } => {
            if let Some(s) = slot(nodes, adj, *x) {
                for (o, &src) in argmax.iter().enumerate() {
                    if src != usize::MAX {
                        s[src] += g[o];
                    }
                }
            }
        }
        Op::Conv1d { x, w, b, geo } => {
            let (xv, wv) = (val(*x).data.clone(), val(*w).data.clone());
            let (gx, gw, gb) = slots3(nodes, adj, *x, *w, *b);
            kernels::conv1d_backward(&xv, &wv, g, geo, gx, gw, gb);
        }
        Op::Conv2d { x, w, b, geo } => {
            let (xv, wv) = (val(*x).data.clone(), val(*w).data.clone());
            let (gx, gw, gb) = slots3(nodes, adj, *x, *w, *b);
            kernels::conv2d_backward(&xv, &wv, g, geo, gx, gw, gb);
        }
        Op::Mean { x, map, count } => {
            let inv = 1.0 / *count as f64;
            if let Some(s) = slot(nodes, adj, *x) {
                for (i, &o) in map.iter().enumerate() {
                    s[i] += g[o] * inv;
                }
            }
        }
        Op::Sum(a) => {
            if let Some(s) = slot(nodes, adj, *a) {
                s.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            smoothing,
        } => {
            let batch = targets.len();
            let classes = probs.len() / batch;
            if let Some(s) = slot(nodes, adj, *logits) {
                let scale = g[0] / batch as f64;
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..classes {
                        let q = kernels::smoothed_target(c, t, classes, *smoothing);
                        s[r * classes + c] += scale * (probs[r * classes + c] - q);
                    }
                }
            }
        }
    }
}

fn two_slots<'a>(
    nodes: &[Node],
    adj: &'a mut [Option<Vec<f64>>],
    a: usize,
    b: usize,
) -> (Option<&'a mut [f64]>, Option<&'a mut [f64]>) {
    debug_assert_ne!(a, b);
    let _ = slot(nodes, adj, a);
    let _ = slot(nodes, adj, b);
    let (lo, hi, swap) = if a < b { (a, b, false) } else { (b, a, true) };
    let (left, right) = adj.split_at_mut(hi);
    let lo_slot = if nodes[lo].requires_grad {
        left[lo].as_deref_mut()
    } else {
        None
    };
    let hi_slot = if nodes[hi].requires_grad {
        right[0].as_deref_mut()
    } else {
        None
    };
    if swap {
        (hi_slot, lo_slot)
    } else {
        (lo_slot, hi_slot)
    }
}

fn same_tape(a: &Var<'_>, b: &Var<'_>) {
    assert!(std::ptr::eq(a.tape, b.tape), "vars from different tapes");
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(shape_err(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape),
        ));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn node(&self) -> Ref<'t, Node> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn value(&self) -> Tensor {
        self.node().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().value.shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    /// Calls `f` on the forward values of `self` and `other` without cloning.
    fn with2<R>(&self, other: &Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        same_tape(self, other);
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.node().value)
    }

    fn zip_with(
        &self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.with2(&other, |a, b| {
            check_same_shape(op, a, b)?;
            Ok(Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
            })
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.tape.push_op(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.tape.push_op(v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.tape.push_op(v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.with(|a| Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|x| x * c).collect(),
        });
        self.tape.push_op(v, Op::Scale(self.id, c))
    }

    /// Adds a vector along the last axis (the only broadcast the engine supports).
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let v = self.with2(&bias, |x, b| {
            let last = *x.shape.last().unwrap_or(&1);
            if b.rank() != 1 || b.shape[0] != last {
                return Err(Error::Dimension {
                    op: "add_bias",
                    lhs: x.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            Ok(Tensor {
                shape: x.shape.clone(),
                data: x
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + b.data[i % last])
                    .collect(),
            })
        })?;
        Ok(self.tape.push_op(v, Op::AddBias(self.id, bias.id)))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.with2(&other, |a, b| {
            if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            Ok(Tensor {
                shape: vec![m, n],
                data: kernels::matmul(&a.data, &b.data, m, k, n),
            })
        })?;
        Ok(self.tape.push_op(v, Op::MatMul(self.id, other.id)))
    }

    /// `x · W + b` with `W: [in × out]`, `b: [out]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.matmul(weight)?.add_bias(bias)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.with(|a| -> Result<Tensor> {
            expect_rank("transpose", a, 2)?;
            let (m, n) = (a.shape[0], a.shape[1]);
            Ok(Tensor {
                shape: vec![n, m],
                data: kernels::transpose(&a.data, m, n),
            })
        })?;
        Ok(self.tape.push_op(v, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.tape.push_op(v, Op::Reshape(self.id)))
    }

    /// Columns `start..end` of a rank-2 value.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.with(|a| {
            expect_rank("slice_cols", a, 2)?;
            let (m, n) = (a.shape[0], a.shape[1]);
            if start >= end || end > n {
                return Err(shape_err(
                    "slice_cols",
                    format!("range {start}..{end} outside {n} columns"),
                ));
            }
            let mut data = Vec::with_capacity(m * (end - start));
            for r in 0..m {
                data.extend_from_slice(&a.data[r * n + start..r * n + end]);
            }
            Ok(Tensor {
                shape: vec![m, end - start],
                data,
            })
        })?;
        Ok(self.tape.push_op(v, Op::SliceCols { x: self.id, start }))
    }

    /// Rows `start..end` of a rank-2 value.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.with(|a| {
            expect_rank("slice_rows", a, 2)?;
            let (m, n) = (a.shape[0], a.shape[1]);
            if start >= end || end > m {
                return Err(shape_err(
                    "slice_rows",
                    format!("range {start}..{end} outside {m} rows"),
                ));
            }
            Ok(Tensor {
                shape: vec![end - start, n],
                data: a.data[start * n..end * n].to_vec(),
            })
        })?;
        Ok(self.tape.push_op(v, Op::SliceRows { x: self.id, start }))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let tape = first.tape;
        let v = {
            let nodes = tape.nodes.borrow();
            let vals: Vec<&Tensor> = parts
                .iter()
                .map(|p| {
                    same_tape(first, p);
                    &nodes[p.id].value
                })
                .collect();
            let m = vals[0].shape.first().copied().unwrap_or(0);
            for t in &vals {
                if t.rank() != 2 || t.shape[0] != m {
                    return Err(Error::Dimension {
                        op: "concat_cols",
                        lhs: vals[0].shape.clone(),
                        rhs: t.shape.clone(),
                    });
                }
            }
            let total: usize = vals.iter().map(|t| t.shape[1]).sum();
            let mut data = Vec::with_capacity(m * total);
            for r in 0..m {
                for t in &vals {
                    let n = t.shape[1];
                    data.extend_from_slice(&t.data[r * n..(r + 1) * n]);
                }
            }
            Tensor {
                shape: vec![m, total],
                data,
            }
        };
        Ok(tape.push_op(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let tape = first.tape;
        let v = {
            let nodes = tape.nodes.borrow();
            let vals: Vec<&Tensor> = parts
                .iter()
                .map(|p| {
                    same_tape(first, p);
                    &nodes[p.id].value
                })
                .collect();
            let n = vals[0].shape.get(1).copied().unwrap_or(0);
            for t in &vals {
                if t.rank() != 2 || t.shape[1] != n {
                    return Err(Error::Dimension {
                        op: "concat_rows",
                        lhs: vals[0].shape.clone(),
                        rhs: t.shape.clone(),
                    });
                }
            }
            let rows: usize = vals.iter().map(|t| t.shape[0]).sum();
            let data = vals.iter().flat_map(|t| t.data.iter().copied()).collect();
            Tensor {
                shape: vec![rows, n],
                data,
            }
        };
        Ok(tape.push_op(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let v = self.with(|a| Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| kernels::gelu(x)).collect(),
        });
        self.tape.push_op(v, Op::Gelu(self.id))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let v = self.with(|a| {
            if axis >= a.rank() {
                return Err(shape_err(
                    "softmax",
                    format!("axis {axis} invalid for {:?}", a.shape),
                ));
            }
            if !a.is_finite() {
                return Err(Error::NonFinite { op: "softmax" });
            }
            Ok(Tensor {
                shape: a.shape.clone(),
                data: kernels::softmax(&a.data, &a.shape, axis),
            })
        })?;
        Ok(self.tape.push_op(v, Op::Softmax { x: self.id, axis }))
    }

    /// Normalises each vector along the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (v, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g, b) = (
                &nodes[self.id].value,
                &nodes[gain.id].value,
                &nodes[bias.id].value,
            );
            let n = *x
                .shape
                .last()
                .ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
            if g.shape != [n] || b.shape != [n] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: x.shape.clone(),
                    rhs: g.shape.clone(),
                });
            }
            let (out, xhat, rstd) = kernels::layer_norm(&x.data, &g.data, &b.data, n, eps);
            (
                Tensor {
                    shape: x.shape.clone(),
                    data: out,
                },
                xhat,
                rstd,
            )
        };
        Ok(self.tape.push_op(
            v,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
        ))
    }

    /// Max pooling along axis 0 of a `[len × channels]` value (padding never wins).
    pub fn maxpool1d(self, k: usize, s: usize, p: usize) -> Result<Var<'t>> {
        let (v, argmax) = self.with(|a| {
            expect_rank("maxpool1d", a, 2)?;
            if p >= k {
                return Err(shape_err("maxpool1d", format!("padding {p} >= kernel {k}")));
            }
            let (len, ch) = (a.shape[0], a.shape[1]);
            let out_len = window_out_len(len, k, s, p)?;
            let (data, arg) = kernels::maxpool1d(&a.data, len, ch, out_len, k, s, p);
            Ok((
                Tensor {
                    shape: vec![out_len, ch],
                    data,
                },
                arg,
            ))
        })?;
        Ok(self.tape.push_op(v, Op::MaxPool1d { x: self.id, argmax }))
    }

    /// Convolution along axis 0 of `[len × cin]` with `w: [cout × cin × k]`.
    pub fn conv1d(self, w: Var<'t>, b: Var<'t>, k: usize, s: usize, p: usize) -> Result<Var<'t>> {
        let (v, geo) = {
            let nodes = self.tape.nodes.borrow();
            let (x, wt, bt) = (&nodes[self.id].value, &nodes[w.id].value, &nodes[b.id].value);
            expect_rank("conv1d", x, 2)?;
            let (len, cin) = (x.shape[0], x.shape[1]);
            if wt.rank() != 3 || wt.shape[1] != cin || wt.shape[2] != k {
                return Err(Error::Dimension {
                    op: "conv1d",
                    lhs: x.shape.clone(),
                    rhs: wt.shape.clone(),
                });
            }
            let cout = wt.shape[0];
            if bt.shape != [cout] {
                return Err(Error::Dimension {
                    op: "conv1d",
                    lhs: wt.shape.clone(),
                    rhs: bt.shape.clone(),
                });
            }
            let out_len = window_out_len(len, k, s, p)?;
            let geo = Conv1dGeom {
                len,
                cin,
                cout,
                out_len,
                k,
                s,
                p,
            };
            let data = kernels::conv1d(&x.data, &wt.data, &bt.data, &geo);
            (
                Tensor {
                    shape: vec![out_len, cout],
                    data,
                },
                geo,
            )
        };
        Ok(self.tape.push_op(
            v,
            Op::Conv1d {
                x: self.id,
                w: w.id,
                b: b.id,
                geo,
            },
        ))
    }

    /// 2D convolution of `[h × w × cin]` with `w: [cout × cin × k × k]`.
    pub fn conv2d(self, w: Var<'t>, b: Var<'t>, k: usize, s: usize, p: usize) -> Result<Var<'t>> {
        let (v, geo) = {
            let nodes = self.tape.nodes.borrow();
            let (x, wt, bt) = (&nodes[self.id].value, &nodes[w.id].value, &nodes[b.id].value);
            expect_rank("conv2d", x, 3)?;
            let (h, wd, cin) = (x.shape[0], x.shape[1], x.shape[2]);
            if wt.rank() != 4 || wt.shape[1] != cin || wt.shape[2] != k || wt.shape[3] != k {
                return Err(Error::Dimension {
                    op: "conv2d",
                    lhs: x.shape.clone(),
                    rhs: wt.shape.clone(),
                });
            }
            let cout = wt.shape[0];
            if bt.shape != [cout] {
                return Err(Error::Dimension {
                    op: "conv2d",
                    lhs: wt.shape.clone(),
                    rhs: bt.shape.clone(),
                });
            }
            let geo = Conv2dGeom {
                h,
                w: wd,
                cin,
                cout,
                out_h: window_out_len(h, k, s, p)?,
                out_w: window_out_len(wd, k, s, p)?,
                k,
                s,
                p,
            };
            let data = kernels::conv2d(&x.data, &wt.data, &bt.data, &geo);
            (
                Tensor {
                    shape: vec![geo.out_h, geo.out_w, cout],
                    data,
                },
                geo,
            )
        };
        Ok(self.tape.push_op(
            v,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.id,
                geo,
            },
        ))
    }

    /// Mean over `axes`, which are removed from the shape.
    pub fn mean(self, axes: &[usize]) -> Result<Var<'t>> {
        let (v, map, count) = self.with(|a| {
            let mut axes = axes.to_vec();
            axes.sort_unstable();
            axes.dedup();
            if axes.is_empty() || axes.iter().any(|&ax| ax >= a.rank()) {
                return Err(shape_err(
                    "mean",
                    format!("axes {axes:?} invalid for {:?}", a.shape),
                ));
            }
            let (map, out_shape) = kernels::reduce_index_map(&a.shape, &axes);
            let count: usize = axes.iter().map(|&ax| a.shape[ax]).product();
            let mut data = vec![0.0; out_shape.iter().product()];
            for (i, &o) in map.iter().enumerate() {
                data[o] += a.data[i];
            }
            data.iter_mut().for_each(|v| *v /= count as f64);
            Ok((
                Tensor {
                    shape: out_shape,
                    data,
                },
                map,
                count,
            ))
        })?;
        Ok(self.tape.push_op(v, Op::Mean { x: self.id, map, count }))
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.with(|a| Tensor::scalar(a.data.iter().sum()));
        self.tape.push_op(v, Op::Sum(self.id))
    }

    /// Mean label-smoothed cross entropy of `[batch × classes]` logits.
    pub fn cross_entropy(self, targets: &[usize], smoothing: f64) -> Result<Var<'t>> {
        let (v, probs) = self.with(|a| {
            expect_rank("cross_entropy", a, 2)?;
            let (batch, classes) = (a.shape[0], a.shape[1]);
            if targets.len() != batch || targets.iter().any(|&t| t >= classes) {
                return Err(shape_err(
                    "cross_entropy",
                    format!("{} targets for logits {:?}", targets.len(), a.shape),
                ));
            }
            if !(0.0..1.0).contains(&smoothing) {
                return Err(Error::Contract(format!("label smoothing {smoothing} outside [0, 1)")));
            }
            let (loss, probs) = kernels::cross_entropy(&a.data, classes, targets, smoothing);
            Ok((Tensor::scalar(loss), probs))
        })?;
        Ok(self.tape.push_op(
            v,
            Op::CrossEntropy {
                logits: self.id,
                probs,
                targets: targets.to_vec(),
                smoothing,
            },
        ))
    }

    pub fn backward(self) -> Result<()> {
        self.tape.backward(self)
    }
}
