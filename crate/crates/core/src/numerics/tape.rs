//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node holding
//! its value and the inputs it read. [`Tape::backward`] walks the nodes in
//! reverse, accumulates vector-Jacobian products, writes the results into the
//! gradient buffers of a [`Params`] set, and clears the tape.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::params::{ParamVars, Params};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
struct AttnSpec {
    heads: usize,
    batch: usize,
    lq: usize,
    lk: usize,
    mask: Rc<[bool]>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddChannel(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Rc<[usize]>),
    Gelu(usize),
    Silu(usize),
    Sigmoid(usize),
    LayerNorm(usize, Rc<[f64]>),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    CrossEntropy(usize, Rc<[usize]>, Rc<[f64]>),
    NegSqDist(usize, usize, f64),
    StraightThrough(usize),
    Conv2d(usize, usize, ConvGeom, Rc<[f64]>),
    Upsample(usize, usize),
    Attention(usize, usize, usize, AttnSpec, Rc<[f64]>),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | AddRow(a, b)
            | MulRow(a, b)
            | AddChannel(a, b)
            | MatMul(a, b)
            | NegSqDist(a, b, _)
            | Conv2d(a, b, _, _) => vec![*a, *b],
            Scale(a, _)
            | AddScalar(a)
            | Transpose(a)
            | Reshape(a)
            | SliceRows(a, _)
            | SliceCols(a, _)
            | GatherRows(a, _)
            | Gelu(a)
            | Silu(a)
            | Sigmoid(a)
            | LayerNorm(a, _)
            | Sum(a)
            | Mean(a)
            | Softmax(a)
            | CrossEntropy(a, _, _)
            | StraightThrough(a)
            | Upsample(a, _) => vec![*a],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            Attention(q, k, v, _, _) => vec![*q, *k, *v],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, usize)>>,
}

/// Handle to a value recorded on a [`Tape`].
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported under `name` by [`Tape::gradients`].
    pub fn leaf(&self, name: &str, value: Tensor) -> Var<'_> {
        let v = self.push_node(value, Op::Leaf, true);
        self.params.borrow_mut().push((name.to_string(), v.id));
        v
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind<'t>(&'t self, params: &Params) -> ParamVars<'t> {
        ParamVars::new(
            params
                .iter()
                .map(|(name, t)| (name.to_string(), self.leaf(name, t.clone())))
                .collect(),
        )
    }

    /// Registers every parameter as a constant (frozen weights).
    pub fn bind_frozen<'t>(&'t self, params: &Params) -> ParamVars<'t> {
        ParamVars::new(
            params
                .iter()
                .map(|(name, t)| (name.to_string(), self.constant(t.clone())))
                .collect(),
        )
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let (value, _) = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
            let cols = nodes[first.id].value.as_matrix().1;
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.id].value;
                let (r, c) = t.as_matrix();
                if c != cols {
                    return Err(Error::shape(
                        "concat_rows",
                        nodes[first.id].value.shape(),
                        t.shape(),
                    ));
                }
                rows += r;
                data.extend_from_slice(t.data());
            }
            (Tensor::new([rows, cols], data)?, ())
        };
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
            let rows = nodes[first.id].value.as_matrix().0;
            let widths: Vec<usize> = parts
                .iter()
                .map(|p| nodes[p.id].value.as_matrix().1)
                .collect();
            for p in parts {
                let t = &nodes[p.id].value;
                if t.as_matrix().0 != rows {
                    return Err(Error::shape(
                        "concat_cols",
                        nodes[first.id].value.shape(),
                        t.shape(),
                    ));
                }
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.row(r));
                }
            }
            Tensor::new([rows, total], data)?
        };
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Multi-head scaled dot-product attention over a batch of sequences.
    ///
    /// `q` is `[batch·lq × D]`, `k` and `v` are `[batch·lk × D]`, and `mask`
    /// is a row-major `lq × lk` permission matrix shared by every batch
    /// element. Disallowed scores are excluded from the softmax.
    pub fn attention<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        heads: usize,
        batch: usize,
        mask: Rc<[bool]>,
    ) -> Result<Var<'t>> {
        let (value, spec, probs) = {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.id].value, &nodes[k.id].value, &nodes[v.id].value);
            let (qr, d) = qv.as_matrix();
            let (kr, kd) = kv.as_matrix();
            if kd != d || kv.shape() != vv.shape() || heads == 0 || d % heads != 0 || batch == 0 {
                return Err(Error::shape("attention", qv.shape(), kv.shape()));
            }
            if qr % batch != 0 || kr % batch != 0 {
                return Err(Error::shape("attention", qv.shape(), &[batch]));
            }
            let (lq, lk) = (qr / batch, kr / batch);
            if mask.len() != lq * lk {
                return Err(Error::shape("attention mask", &[lq, lk], &[mask.len()]));
            }
            if (0..lq).any(|i| !mask[i * lk..(i + 1) * lk].iter().any(|&m| m)) {
                return Err(Error::Contract(
                    "attention mask row with no allowed key".into(),
                ));
            }
            let spec = AttnSpec {
                heads,
                batch,
                lq,
                lk,
                mask,
            };
            let (out, probs) = attention_forward(qv.data(), kv.data(), vv.data(), d, &spec);
            (Tensor::new([qr, d], out)?, spec, probs)
        };
        Ok(self.push(value, Op::Attention(q.id, k.id, v.id, spec, probs.into())))
    }

    /// Gradients of `loss` with respect to every leaf registered by name.
    /// Leaves the loss does not reach get zero gradients.
    pub fn gradients(&self, loss: Var<'_>) -> Result<BTreeMap<String, Tensor>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar loss of shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, contrib) in vjp(&node.op, &node.value, &g, &nodes) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let mut out = BTreeMap::new();
        for (name, id) in self.params.borrow().iter() {
            let shape = nodes[*id].value.shape().to_vec();
            let g = if *id <= loss.id {
                grads[*id].take()
            } else {
                None
            };
            let t = match g {
                Some(data) => Tensor::new(shape, data)?,
                None => Tensor::zeros(shape),
            };
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            match out.get_mut(name) {
                Some(existing) => {
                    let existing: &mut Tensor = existing;
                    existing
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, b)| *a += b);
                }
                None => {
                    out.insert(name.clone(), t);
                }
            }
        }
        Ok(out)
    }

    /// Back-propagates `loss` into the gradient buffers of `params`, then
    /// clears the tape. Parameters the loss does not reach get zero gradients.
    pub fn backward(&self, loss: Var<'_>, params: &mut Params) -> Result<()> {
        let grads = self.gradients(loss)?;
        params.zero_grad();
        for (name, g) in grads {
            if let Some(slot) = params.grad_mut(&name) {
                *slot = g;
            }
        }
        self.reset();
        Ok(())
    }

    /// Drops every recorded node.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.params.borrow_mut().clear();
    }
}

fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    s: &AttnSpec,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / s.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; s.batch * s.lq * d];
    let mut probs = vec![0.0; s.batch * s.heads * s.lq * s.lk];
    let mut scores = vec![0.0; s.lk];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            for i in 0..s.lq {
                let qrow = &q[(b * s.lq + i) * d + off..][..dh];
                let mrow = &s.mask[i * s.lk..(i + 1) * s.lk];
                let mut max = f64::NEG_INFINITY;
                for j in 0..s.lk {
                    if mrow[j] {
                        let krow = &k[(b * s.lk + j) * d + off..][..dh];
                        scores[j] = kernels::dot(qrow, krow) * scale;
                        max = max.max(scores[j]);
                    }
                }
                let p = &mut probs[((b * s.heads + h) * s.lq + i) * s.lk..][..s.lk];
                let mut z = 0.0;
                for j in 0..s.lk {
                    if mrow[j] {
                        p[j] = (scores[j] - max).exp();
                        z += p[j];
                    }
                }
                let orow = &mut out[(b * s.lq + i) * d + off..][..dh];
                for j in 0..s.lk {
                    if mrow[j] {
                        p[j] /= z;
                        let vrow = &v[(b * s.lk + j) * d + off..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p[j] * vv;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    s: &AttnSpec,
    probs: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / s.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; s.lk];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            for i in 0..s.lq {
                let qi = (b * s.lq + i) * d + off;
                let grow = &g[qi..qi + dh];
                let p = &probs[((b * s.heads + h) * s.lq + i) * s.lk..][..s.lk];
                let mrow = &s.mask[i * s.lk..(i + 1) * s.lk];
                let mut inner = 0.0;
                for j in 0..s.lk {
                    if mrow[j] {
                        let kj = (b * s.lk + j) * d + off;
                        dp[j] = kernels::dot(grow, &v[kj..kj + dh]);
                        inner += dp[j] * p[j];
                        for (dvv, &gg) in dv[kj..kj + dh].iter_mut().zip(grow) {
                            *dvv += p[j] * gg;
                        }
                    }
                }
                for j in 0..s.lk {
                    if mrow[j] {
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = (b * s.lk + j) * d + off;
                        for t in 0..dh {
                            dq[qi + t] += ds * k[kj + t];
                            dk[kj + t] += ds * q[qi + t];
                        }
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

/// Vector-Jacobian products of one node: `(input id, gradient)` pairs.
fn vjp(op: &Op, out: &Tensor, g: &[f64], nodes: &[Node]) -> Vec<(usize, Vec<f64>)> {
    let val = |i: usize| &nodes[i].value;
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            vec![
                (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
            ]
        }
        Op::AddRow(a, b) => {
            let n = val(*b).numel();
            let mut gb = vec![0.0; n];
            for row in g.chunks(n) {
                gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
            }
            vec![(*a, g.to_vec()), (*b, gb)]
        }
        Op::MulRow(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let n = bv.len();
            let mut ga = vec![0.0; g.len()];
            let mut gb = vec![0.0; n];
            for (r, (grow, arow)) in g.chunks(n).zip(av.chunks(n)).enumerate() {
                for j in 0..n {
                    ga[r * n + j] = grow[j] * bv[j];
                    gb[j] += grow[j] * arow[j];
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::AddChannel(a, b) => {
            let c = val(*b).numel();
            let plane = g.len() / c;
            let gb = g.chunks(plane).map(|p| p.iter().sum()).collect();
            vec![(*a, g.to_vec()), (*b, gb)]
        }
        Op::Scale(a, s) => vec![(*a, g.iter().map(|x| x * s).collect())],
        Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => vec![(*a, g.to_vec())],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = av.as_matrix();
            let n = bv.as_matrix().1;
            let mut out = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                out.push((*a, kernels::matmul_a_bt(g, bv.data(), m, n, k)));
            }
            if nodes[*b].requires_grad {
                out.push((*b, kernels::matmul_at_b(av.data(), g, m, k, n)));
            }
            out
        }
        Op::Transpose(a) => {
            let (r, c) = out.as_matrix();
            let mut ga = vec![0.0; g.len()];
            for i in 0..r {
                for j in 0..c {
                    ga[j * r + i] = g[i * c + j];
                }
            }
            vec![(*a, ga)]
        }
        Op::SliceRows(a, start) => {
            let av = val(*a);
            let cols = av.as_matrix().1;
            let mut ga = vec![0.0; av.numel()];
            ga[start * cols..start * cols + g.len()].copy_from_slice(g);
            vec![(*a, ga)]
        }
        Op::SliceCols(a, start) => {
            let av = val(*a);
            let (rows, cols) = av.as_matrix();
            let w = out.as_matrix().1;
            let mut ga = vec![0.0; av.numel()];
            for r in 0..rows {
                ga[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![(*a, ga)]
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            parts
                .iter()
                .map(|&p| {
                    let n = val(p).numel();
                    let part = g[off..off + n].to_vec();
                    off += n;
                    (p, part)
                })
                .collect()
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = out.as_matrix();
            let mut off = 0;
            parts
                .iter()
                .map(|&p| {
                    let w = val(p).as_matrix().1;
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    off += w;
                    (p, part)
                })
                .collect()
        }
        Op::GatherRows(table, idx) => {
            let tv = val(*table);
            let cols = tv.as_matrix().1;
            let mut gt = vec![0.0; tv.numel()];
            for (r, &i) in idx.iter().enumerate() {
                gt[i * cols..(i + 1) * cols]
                    .iter_mut()
                    .zip(&g[r * cols..(r + 1) * cols])
                    .for_each(|(a, b)| *a += b);
            }
            vec![(*table, gt)]
        }
        Op::Gelu(a) => {
            let av = val(*a).data();
            vec![(
                *a,
                g.iter().zip(av).map(|(g, &x)| g * gelu_grad(x)).collect(),
            )]
        }
        Op::Silu(a) => {
            let av = val(*a).data();
            let ga = g
                .iter()
                .zip(av)
                .map(|(g, &x)| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            vec![(*a, ga)]
        }
        Op::Sigmoid(a) => {
            let ga = g
                .iter()
                .zip(out.data())
                .map(|(g, &y)| g * y * (1.0 - y))
                .collect();
            vec![(*a, ga)]
        }
        Op::LayerNorm(a, rstd) => {
            let cols = out.as_matrix().1;
            let n = cols as f64;
            let mut ga = vec![0.0; g.len()];
            for (r, ((grow, yrow), dst)) in g
                .chunks(cols)
                .zip(out.data().chunks(cols))
                .zip(ga.chunks_mut(cols))
                .enumerate()
            {
                let mean_g = grow.iter().sum::<f64>() / n;
                let mean_gy = kernels::dot(grow, yrow) / n;
                for j in 0..cols {
                    dst[j] = rstd[r] * (grow[j] - mean_g - yrow[j] * mean_gy);
                }
            }
            vec![(*a, ga)]
        }
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
        Op::Mean(a) => {
            let n = val(*a).numel();
            vec![(*a, vec![g[0] / n as f64; n])]
        }
        Op::Softmax(a) => {
            let cols = out.as_matrix().1;
            let mut ga = vec![0.0; g.len()];
            for ((grow, yrow), dst) in g
                .chunks(cols)
                .zip(out.data().chunks(cols))
                .zip(ga.chunks_mut(cols))
            {
                let inner = kernels::dot(grow, yrow);
                for j in 0..cols {
                    dst[j] = yrow[j] * (grow[j] - inner);
                }
            }
            vec![(*a, ga)]
        }
        Op::CrossEntropy(a, targets, probs) => {
            let m = targets.len();
            let k = probs.len() / m;
            let scale = g[0] / m as f64;
            let mut ga: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (i, &t) in targets.iter().enumerate() {
                ga[i * k + t] -= scale;
            }
            vec![(*a, ga)]
        }
        Op::NegSqDist(x, codes, tau) => {
            // The code table is treated as frozen: no gradient flows into it.
            let (xv, cv) = (val(*x), val(*codes));
            let (n, d) = xv.as_matrix();
            let k = cv.as_matrix().0;
            let gc = kernels::matmul(g, cv.data(), n, k, d);
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                let gsum: f64 = g[i * k..(i + 1) * k].iter().sum();
                for t in 0..d {
                    gx[i * d + t] = -2.0 / tau * (xv.data()[i * d + t] * gsum - gc[i * d + t]);
                }
            }
            vec![(*x, gx)]
        }
        Op::Conv2d(input, kernel, geom, cols) => {
            let kv = val(*kernel);
            let c_out = kv.shape()[0];
            let p = geom.out_positions();
            let pl = geom.patch_len();
            let mut out = Vec::with_capacity(2);
            if nodes[*kernel].requires_grad {
                out.push((*kernel, kernels::matmul_a_bt(g, cols, c_out, p, pl)));
            }
            if nodes[*input].requires_grad {
                let dcols = kernels::matmul_at_b(kv.data(), g, c_out, pl, p);
                out.push((*input, kernels::col2im(&dcols, geom)));
            }
            out
        }
        Op::Upsample(a, f) => {
            let av = val(*a);
            let (c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let (ho, wo) = (h * f, w * f);
            let mut ga = vec![0.0; av.numel()];
            for ch in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        ga[ch * h * w + (y / f) * w + x / f] += g[ch * ho * wo + y * wo + x];
                    }
                }
            }
            vec![(*a, ga)]
        }
        Op::Attention(q, k, v, spec, probs) => {
            let d = val(*q).as_matrix().1;
            let (dq, dk, dv) = attention_backward(
                g,
                val(*q).data(),
                val(*k).data(),
                val(*v).data(),
                d,
                spec,
                probs,
            );
            vec![(*q, dq), (*k, dk), (*v, dv)]
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the recorded value. Drop it before recording new operations.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value_ref().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let value = f(&self.value_ref())?;
        Ok(self.tape.push(value, op))
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = {
            let v = self.value_ref();
            let data = v.data().iter().map(|&x| f(x)).collect();
            Tensor::new(v.shape().to_vec(), data).expect("shape preserved")
        };
        self.tape.push(value, op)
    }

    fn zip_same(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value_ref(), other.value_ref());
            if a.shape() != b.shape() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.push(value, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    fn row_broadcast(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value_ref(), other.value_ref());
            let n = b.numel();
            if a.as_matrix().1 != n {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let data = a
                .data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.push(value, op))
    }

    /// Adds a length-`n` vector to every row of an `[.. × n]` value.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(bias, "add_row", Op::AddRow(self.id, bias.id), |a, b| a + b)
    }

    /// Multiplies every row of an `[.. × n]` value by a length-`n` vector.
    pub fn mul_row(self, gain: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(gain, "mul_row", Op::MulRow(self.id, gain.id), |a, b| a * b)
    }

    /// Adds a per-channel bias to a `[C×H×W]` feature map.
    pub fn add_channel(self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value_ref(), bias.value_ref());
            if a.rank() != 3 || a.shape()[0] != b.numel() {
                return Err(Error::shape("add_channel", a.shape(), b.shape()));
            }
            let plane = a.shape()[1] * a.shape()[2];
            let data = a
                .data()
                .chunks(plane)
                .zip(b.data())
                .flat_map(|(p, &bb)| p.iter().map(move |&x| x + bb))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.push(value, Op::AddChannel(self.id, bias.id)))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.map(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.map(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn gelu(self) -> Var<'t> {
        self.map(Op::Gelu(self.id), gelu)
    }

    pub fn silu(self) -> Var<'t> {
        self.map(Op::Silu(self.id), |x| x * sigmoid(x))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(Op::Sigmoid(self.id), sigmoid)
    }

    /// Matrix product of two rank-2 values.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value_ref(), other.value_ref());
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::new([m, n], kernels::matmul(a.data(), b.data(), m, k, n))?
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.unary(Op::Transpose(self.id), |a| {
            if a.rank() != 2 {
                return Err(Error::shape("transpose", a.shape(), &[2]));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::new([c, r], data)
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Reshape(self.id), |a| a.clone().reshape(shape.to_vec()))
    }

    /// Rows `start..start+len` of the matrix view.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(Op::SliceRows(self.id, start), |a| {
            let (rows, cols) = a.as_matrix();
            if len == 0 || start + len > rows {
                return Err(Error::shape("slice_rows", a.shape(), &[start, len]));
            }
            Tensor::new(
                [len, cols],
                a.data()[start * cols..(start + len) * cols].to_vec(),
            )
        })
    }

    /// Columns `start..start+len` of the matrix view.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(Op::SliceCols(self.id, start), |a| {
            let (rows, cols) = a.as_matrix();
            if len == 0 || start + len > cols {
                return Err(Error::shape("slice_cols", a.shape(), &[start, len]));
            }
            let data = (0..rows)
                .flat_map(|r| {
                    a.data()[r * cols + start..r * cols + start + len]
                        .iter()
                        .copied()
                })
                .collect();
            Tensor::new([rows, len], data)
        })
    }

    /// Selects rows of a `[V × D]` table (embedding lookup).
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let idx: Rc<[usize]> = indices.into();
        self.unary(Op::GatherRows(self.id, idx.clone()), |a| {
            let (rows, cols) = a.as_matrix();
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx.iter() {
                if i >= rows {
                    return Err(Error::Index {
                        index: i,
                        bound: rows,
                    });
                }
                data.extend_from_slice(a.row(i));
            }
            Tensor::new([idx.len().max(1), cols], data)
        })
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let (value, rstd) = {
            let a = self.value_ref();
            let cols = a.as_matrix().1;
            let mut data = vec![0.0; a.numel()];
            let mut rstd = Vec::with_capacity(a.numel() / cols);
            for (src, dst) in a.data().chunks(cols).zip(data.chunks_mut(cols)) {
                let mean = src.iter().sum::<f64>() / cols as f64;
                let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                let r = 1.0 / (var + eps).sqrt();
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - mean) * r;
                }
                rstd.push(r);
            }
            (
                Tensor::new(a.shape().to_vec(), data).expect("shape preserved"),
                rstd,
            )
        };
        self.tape.push(value, Op::LayerNorm(self.id, rstd.into()))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value_ref().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let s = {
            let v = self.value_ref();
            v.data().iter().sum::<f64>() / v.numel() as f64
        };
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Var<'t> {
        let value = {
            let a = self.value_ref();
            let cols = a.as_matrix().1;
            Tensor::new(a.shape().to_vec(), softmax_rows(a.data(), cols)).expect("shape preserved")
        };
        self.tape.push(value, Op::Softmax(self.id))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[M × K]` logits.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = {
            let a = self.value_ref();
            let (m, k) = a.as_matrix();
            if targets.len() != m {
                return Err(Error::shape("cross_entropy", a.shape(), &[targets.len()]));
            }
            if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
                return Err(Error::Index {
                    index: bad,
                    bound: k,
                });
            }
            let probs = softmax_rows(a.data(), k);
            let mut total = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                let row = a.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
            (total / m as f64, probs)
        };
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(self.id, targets.into(), probs.into()),
        ))
    }

    /// `l[i][k] = -‖x_i − c_k‖² / τ` for `[N × d]` queries against a `[K × d]`
    /// code table. The code table never receives gradient.
    pub fn neg_sq_dist(self, codes: Var<'t>, tau: f64) -> Result<Var<'t>> {
        if !(tau > 0.0) {
            return Err(Error::Param(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let value = {
            let (x, c) = (self.value_ref(), codes.value_ref());
            let (n, d) = x.as_matrix();
            let (k, dc) = c.as_matrix();
            if d != dc || c.rank() != 2 {
                return Err(Error::shape("neg_sq_dist", x.shape(), c.shape()));
            }
            let mut data = vec![0.0; n * k];
            for i in 0..n {
                let xi = x.row(i);
                for j in 0..k {
                    let dist: f64 = xi
                        .iter()
                        .zip(c.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    data[i * k + j] = -dist / tau;
                }
            }
            Tensor::new([n, k], data)?
        };
        let requires = self.requires_grad();
        Ok(self
            .tape
            .push_node(value, Op::NegSqDist(self.id, codes.id, tau), requires))
    }

    /// Forward value `quantized`, backward identity onto `self`.
    pub fn straight_through(self, quantized: Tensor) -> Result<Var<'t>> {
        {
            let a = self.value_ref();
            if a.shape() != quantized.shape() {
                return Err(Error::shape(
                    "straight_through",
                    a.shape(),
                    quantized.shape(),
                ));
            }
        }
        Ok(self.tape.push(quantized, Op::StraightThrough(self.id)))
    }

    /// Same value, cut from the gradient path.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    /// Cross-correlation of a `[C_in×H×W]` input with `[C_out×C_in×k×k]` kernels.
    pub fn conv2d(self, kernels_var: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        if stride == 0 {
            return Err(Error::Param("conv2d stride must be positive".into()));
        }
        let (value, geom, cols) = {
            let (x, w) = (self.value_ref(), kernels_var.value_ref());
            if x.rank() != 3
                || w.rank() != 4
                || w.shape()[1] != x.shape()[0]
                || w.shape()[2] != w.shape()[3]
            {
                return Err(Error::shape("conv2d", x.shape(), w.shape()));
            }
            let geom = ConvGeom::new(
                x.shape()[0],
                x.shape()[1],
                x.shape()[2],
                w.shape()[2],
                stride,
                pad,
            )
            .ok_or_else(|| Error::shape("conv2d", x.shape(), w.shape()))?;
            let cols = kernels::im2col(x.data(), &geom);
            let c_out = w.shape()[0];
            let out = kernels::matmul(
                w.data(),
                &cols,
                c_out,
                geom.patch_len(),
                geom.out_positions(),
            );
            (
                Tensor::new([c_out, geom.h_out, geom.w_out], out)?,
                geom,
                cols,
            )
        };
        Ok(self.tape.push(
            value,
            Op::Conv2d(self.id, kernels_var.id, geom, cols.into()),
        ))
    }

    /// Nearest-neighbour upsampling of a `[C×H×W]` map by an integer factor.
    pub fn upsample(self, factor: usize) -> Result<Var<'t>> {
        if factor == 0 {
            return Err(Error::Param("upsample factor must be positive".into()));
        }
        self.unary(Op::Upsample(self.id, factor), |a| {
            if a.rank() != 3 {
                return Err(Error::shape("upsample", a.shape(), &[3]));
            }
            let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (ho, wo) = (h * factor, w * factor);
            let mut data = vec![0.0; c * ho * wo];
            for ch in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        data[ch * ho * wo + y * wo + x] =
                            a.data()[ch * h * w + (y / factor) * w + x / factor];
                    }
                }
            }
            Tensor::new([c, ho, wo], data)
        })
    }

    /// Sum of squared entries.
    pub fn sum_squares(self) -> Var<'t> {
        self.mul(self).expect("same shape").sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf("x", t(&[3], &[1.0, -2.0, 0.5]));
        let g = tape.gradients(x.sum()).unwrap();
        assert_eq!(g["x"].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let tape = Tape::new();
        let data = [0.3, -1.2, 2.0, 4.5];
        let x = tape.leaf("x", t(&[4], &data));
        let loss = x.sum_squares().scale(0.5);
        assert_eq!(tape.gradients(loss).unwrap()["x"].data(), &data);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf("x", t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.gradients(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf("x", t(&[2], &[1.0, 2.0]));
        let _y = tape.leaf("y", t(&[2], &[3.0, 4.0]));
        let g = tape.gradients(x.sum()).unwrap();
        assert_eq!(g["y"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(id.matmul(b).unwrap().value(), b.value());
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
        let err = r.matmul(r).unwrap_err().to_string();
        assert!(err.contains("[1, 2]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let tape = Tape::new();
        let u = tape.constant(t(&[4], &[0.0; 4])).softmax().value();
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let s = tape.constant(t(&[2], &[1000.0, 0.0])).softmax().value();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_limits() {
        let tape = Tape::new();
        let confident = tape.constant(t(&[1, 3], &[1e6, 0.0, 0.0]));
        assert!(confident.cross_entropy(&[0]).unwrap().item().unwrap().abs() < 1e-12);
        let uniform = tape.constant(t(&[1, 4], &[0.0; 4]));
        let l = uniform.cross_entropy(&[2]).unwrap().item().unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(
            uniform.cross_entropy(&[4]),
            Err(Error::Index { index: 4, bound: 4 })
        ));
    }

    #[test]
    fn conv_scalar_kernel_scales_input() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let x = tape.constant(t(&[1, 3, 3], &data));
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = x.conv2d(k, 1, 0).unwrap().value();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().zip(&data).all(|(a, b)| *a == 2.0 * b));
        let zero = tape.constant(Tensor::zeros([2, 1, 3, 3]));
        let z = x.conv2d(zero, 1, 1).unwrap().value();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(matches!(x.conv2d(k, 0, 0), Err(Error::Param(_))));
    }

    #[test]
    fn straight_through_passes_gradient() {
        let tape = Tape::new();
        let x = tape.leaf("x", t(&[2], &[0.1, 0.2]));
        let q = x.straight_through(t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(q.value().data(), &[1.0, 1.0]);
        let g = tape.gradients(q.scale(3.0).sum()).unwrap();
        assert_eq!(g["x"].data(), &[3.0, 3.0]);
    }

    #[test]
    fn detached_value_has_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf("x", t(&[2], &[1.0, 2.0]));
        let g = tape.gradients(x.detach().mul(x).unwrap().sum()).unwrap();
        assert_eq!(g["x"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn attention_uniform_scores_average_allowed_values() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::zeros([2, 2]));
        let k = tape.constant(Tensor::zeros([3, 2]));
        let v = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 100.0, 100.0]));
        let mask: Rc<[bool]> = vec![true, true, false, true, true, true].into();
        let o = tape.attention(q, k, v, 1, 1, mask).unwrap().value();
        assert_eq!(o.row(0), &[2.0, 3.0]);
        assert!((o.row(1)[0] - 104.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn backward_clears_tape() {
        let mut params = Params::new();
        params.insert("w", t(&[2], &[1.0, 2.0])).unwrap();
        let tape = Tape::new();
        let vars = tape.bind(&params);
        let loss = vars.get("w").unwrap().sum_squares();
        tape.backward(loss, &mut params).unwrap();
        assert!(tape.is_empty());
        assert_eq!(params.grad("w").unwrap().data(), &[2.0, 4.0]);
    }
}
