//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already topologically sorted. [`Graph::backward`] walks it once in reverse
//! and leaves gradients on the leaves that asked for them. A graph can be
//! differentiated only once; gradient accumulation across micro-batches has to
//! be done by the caller.
//!
//! Binary elementwise ops broadcast under trailing-dimension rules: shapes are
//! aligned from the right and each pair of extents must be equal or contain a 1.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var, map_a: Option<Vec<usize>>, map_b: Option<Vec<usize>> },
    Mul { a: Var, b: Var, map_a: Option<Vec<usize>>, map_b: Option<Vec<usize>> },
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { table: Var, idx: Vec<usize> },
    Reshape(Var),
    Permute { a: Var, offsets: Vec<usize> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// A single-use recording of a computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.push_shared(Arc::new(value), requires_grad, op)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Frozen leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Frozen leaf sharing storage with the caller (e.g. backbone weights).
    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, false, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass, present on every trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    // ----------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` for matrices, where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (m, k) = logical2(self.value(a), ta)?;
        let (k2, n) = logical2(self.value(b), tb)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?}{} x {:?}{}",
                self.shape(a),
                if ta { "ᵀ" } else { "" },
                self.shape(b),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b, ta, tb }))
    }

    /// Batched matmul over rank-3 tensors `[batch, ·, ·]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ba, m, k) = logical3(self.value(a), ta)?;
        let (bb, k2, n) = logical3(self.value(b), tb)?;
        if ba != bb || k != k2 {
            return Err(Error::Dimension(format!(
                "bmm shapes disagree: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; ba * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..ba {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    ta,
                    &bd[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![ba, m, n], out)?, rg, Op::BatchMatMul { a, b, ta, tb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, map_a, map_b) = self.broadcast(a, b)?;
        let out = zip_mapped(self.value(a), self.value(b), &map_a, &map_b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Add { a, b, map_a, map_b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, map_a, map_b) = self.broadcast(a, b)?;
        let out = zip_mapped(self.value(a), self.value(b), &map_a, &map_b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Mul { a, b, map_a, map_b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        let rg = self.rg(a);
        self.push(t, rg, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(t, rg, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, rg, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        let rg = self.rg(a);
        self.push(t, rg, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|x| !(**x > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive entry {x}")));
        }
        let t = self.map(a, f64::ln);
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Log(a)))
    }

    /// Softmax along `axis`, which must be the last axis.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || axis + 1 != shape.len() {
            return Err(Error::Dimension(format!(
                "softmax supports only the last axis; got axis {axis} of {shape:?}"
            )));
        }
        let width = shape[axis];
        if width == 0 {
            return Err(Error::Dimension("softmax over an empty axis".into()));
        }
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Softmax(a)))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Dimension("layer_norm of a scalar".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias must be [{d}], got {:?}/{:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Selects rows of a matrix (embedding lookup, row expansion).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2()?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Dimension(format!("row index {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], out)?,
            rg,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Reshape(a)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if perm.len() != in_shape.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!("invalid permutation {perm:?} for {in_shape:?}")));
        }
        let in_strides = strides(&in_shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let out_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let offsets = strided_offsets(&out_shape, &out_strides);
        let src = self.value(a).data();
        let out: Vec<f64> = offsets.iter().map(|&o| src[o]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::Permute { a, offsets }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Mean token-level negative log-likelihood over unmasked rows of `[T, V]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.value(logits).dims2()?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::Dimension(format!(
                "cross_entropy: {t} rows but {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(bad) = targets.iter().zip(mask).find(|(&y, &m)| m && y >= v) {
            return Err(Error::Dimension(format!("target id {} >= vocabulary {v}", bad.0)));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            let row = &data[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            total -= row[targets[r]] - lse;
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    // ------------------------------------------------------------ backward

    /// Populates gradients of the scalar `loss` on every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
                continue;
            }
            let node = &self.nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k) = logical2(va, *ta)?;
                    let n = out.shape()[1];
                    if self.rg(*a) {
                        let da = slot(&mut grads, *a, va.numel());
                        if *ta {
                            gemm(k, n, m, vb.data(), *tb, &g, true, da, true);
                        } else {
                            gemm(m, n, k, &g, false, vb.data(), !*tb, da, true);
                        }
                    }
                    if self.rg(*b) {
                        let db = slot(&mut grads, *b, vb.numel());
                        if *tb {
                            gemm(n, m, k, &g, true, va.data(), *ta, db, true);
                        } else {
                            gemm(k, m, n, va.data(), !*ta, &g, false, db, true);
                        }
                    }
                }
                Op::BatchMatMul { a, b, ta, tb } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (batch, m, k) = logical3(va, *ta)?;
                    let n = out.shape()[2];
                    let (sa, sb, sg) = (m * k, k * n, m * n);
                    if self.rg(*a) {
                        let da = slot(&mut grads, *a, va.numel());
                        for s in 0..batch {
                            let gs = &g[s * sg..(s + 1) * sg];
                            let bs = &vb.data()[s * sb..(s + 1) * sb];
                            let das = &mut da[s * sa..(s + 1) * sa];
                            if *ta {
                                gemm(k, n, m, bs, *tb, gs, true, das, true);
                            } else {
                                gemm(m, n, k, gs, false, bs, !*tb, das, true);
                            }
                        }
                    }
                    if self.rg(*b) {
                        let db = slot(&mut grads, *b, vb.numel());
                        for s in 0..batch {
                            let gs = &g[s * sg..(s + 1) * sg];
                            let as_ = &va.data()[s * sa..(s + 1) * sa];
                            let dbs = &mut db[s * sb..(s + 1) * sb];
                            if *tb {
                                gemm(n, m, k, gs, true, as_, *ta, dbs, true);
                            } else {
                                gemm(k, m, n, as_, !*ta, gs, false, dbs, true);
                            }
                        }
                    }
                }
                Op::Add { a, b, map_a, map_b } => {
                    for (v, map) in [(*a, map_a), (*b, map_b)] {
                        if self.rg(v) {
                            let n = self.value(v).numel();
                            scatter(slot(&mut grads, v, n), &g, map.as_deref(), |gi, _| gi);
                        }
                    }
                }
                Op::Mul { a, b, map_a, map_b } => {
                    let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                    if self.rg(*a) {
                        let other: Vec<f64> = expand(xb, map_b.as_deref(), g.len());
                        scatter(slot(&mut grads, *a, xa.len()), &g, map_a.as_deref(), |gi, j| gi * other[j]);
                    }
                    if self.rg(*b) {
                        let other: Vec<f64> = expand(xa, map_a.as_deref(), g.len());
                        scatter(slot(&mut grads, *b, xb.len()), &g, map_b.as_deref(), |gi, j| gi * other[j]);
                    }
                }
                Op::Scale(a, c) => {
                    let da = slot(&mut grads, *a, g.len());
                    for (d, gi) in da.iter_mut().zip(&g) {
                        *d += gi * c;
                    }
                }
                Op::Sigmoid(a) => {
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, gi), y) in da.iter_mut().zip(&g).zip(out.data()) {
                        *d += gi * y * (1.0 - y);
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, gi), xi) in da.iter_mut().zip(&g).zip(x) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
                Op::Exp(a) => {
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, gi), y) in da.iter_mut().zip(&g).zip(out.data()) {
                        *d += gi * y;
                    }
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, gi), xi) in da.iter_mut().zip(&g).zip(x) {
                        *d += gi / xi;
                    }
                }
                Op::Softmax(a) => {
                    let w = *out.shape().last().unwrap();
                    let da = slot(&mut grads, *a, g.len());
                    for ((dr, gr), yr) in da.chunks_mut(w).zip(g.chunks(w)).zip(out.data().chunks(w)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..w {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = self.value(*gain).numel();
                    let gv = self.value(*gain).data();
                    if self.rg(*gain) {
                        let dg = slot(&mut grads, *gain, d);
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                    }
                    if self.rg(*bias) {
                        let db = slot(&mut grads, *bias, d);
                        for gr in g.chunks(d) {
                            for j in 0..d {
                                db[j] += gr[j];
                            }
                        }
                    }
                    if self.rg(*x) {
                        let dx = slot(&mut grads, *x, g.len());
                        let mut dh = vec![0.0; d];
                        for (r, ((dxr, gr), hr)) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..d {
                                dh[j] = gr[j] * gv[j];
                                s1 += dh[j];
                                s2 += dh[j] * hr[j];
                            }
                            let c = inv_std[r] / d as f64;
                            for j in 0..d {
                                dxr[j] += c * (d as f64 * dh[j] - s1 - hr[j] * s2);
                            }
                        }
                    }
                }
                Op::GatherRows { table, idx } => {
                    let t = self.value(*table);
                    let cols = t.shape()[1];
                    let dt = slot(&mut grads, *table, t.numel());
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            dt[i * cols + j] += g[r * cols + j];
                        }
                    }
                }
                Op::Reshape(a) => {
                    let da = slot(&mut grads, *a, g.len());
                    for (d, gi) in da.iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::Permute { a, offsets } => {
                    let da = slot(&mut grads, *a, g.len());
                    for (j, &o) in offsets.iter().enumerate() {
                        da[o] += g[j];
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    for d in slot(&mut grads, *a, n).iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    let c = g[0] / n as f64;
                    for d in slot(&mut grads, *a, n).iter_mut() {
                        *d += c;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    probs,
                    count,
                } => {
                    let v = self.shape(*logits)[1];
                    let c = g[0] / *count as f64;
                    let dl = slot(&mut grads, *logits, probs.len());
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..v {
                            dl[r * v + j] += c * probs[r * v + j];
                        }
                        dl[r * v + targets[r]] -= c;
                    }
                }
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------ helpers

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    #[allow(clippy::type_complexity)]
    fn broadcast(&self, a: Var, b: Var) -> Result<(Vec<usize>, Option<Vec<usize>>, Option<Vec<usize>>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((sa.to_vec(), None, None));
        }
        let rank = sa.len().max(sb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(sa), pad(sb));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            out.push(match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => {
                    return Err(Error::Dimension(format!(
                        "shapes {sa:?} and {sb:?} do not broadcast"
                    )))
                }
            });
        }
        let map_for = |p: &[usize]| -> Option<Vec<usize>> {
            if p == out.as_slice() {
                return None;
            }
            let st = strides(p);
            let eff: Vec<usize> = p
                .iter()
                .zip(&out)
                .zip(&st)
                .map(|((&d, &o), &s)| if d == 1 && o != 1 { 0 } else { s })
                .collect();
            Some(strided_offsets(&out, &eff))
        };
        let (ma, mb) = (map_for(&pa), map_for(&pb));
        Ok((out, ma, mb))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax over a slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

fn logical2(t: &Tensor, trans: bool) -> Result<(usize, usize)> {
    let (r, c) = t.dims2()?;
    Ok(if trans { (c, r) } else { (r, c) })
}

fn logical3(t: &Tensor, trans: bool) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [b, r, c] => Ok(if trans { (b, c, r) } else { (b, r, c) }),
        _ => Err(Error::Dimension(format!("expected rank-3 tensor, got {:?}", t.shape()))),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offset for every element of `shape`, visited in row-major order.
fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn zip_mapped(
    a: &Tensor,
    b: &Tensor,
    ma: &Option<Vec<usize>>,
    mb: &Option<Vec<usize>>,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let (ad, bd) = (a.data(), b.data());
    let n = match (ma, mb) {
        (Some(m), _) | (_, Some(m)) => m.len(),
        _ => ad.len(),
    };
    (0..n)
        .map(|j| {
            let x = match ma {
                Some(m) => ad[m[j]],
                None => ad[j],
            };
            let y = match mb {
                Some(m) => bd[m[j]],
                None => bd[j],
            };
            f(x, y)
        })
        .collect()
}

fn expand(src: &[f64], map: Option<&[usize]>, n: usize) -> Vec<f64> {
    match map {
        None => src.to_vec(),
        Some(m) => (0..n).map(|j| src[m[j]]).collect(),
    }
}

fn scatter(dst: &mut [f64], g: &[f64], map: Option<&[usize]>, f: impl Fn(f64, usize) -> f64) {
    match map {
        None => {
            for (j, (d, gi)) in dst.iter_mut().zip(g).enumerate() {
                *d += f(*gi, j);
            }
        }
        Some(m) => {
            for (j, gi) in g.iter().enumerate() {
                dst[m[j]] += f(*gi, j);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}
