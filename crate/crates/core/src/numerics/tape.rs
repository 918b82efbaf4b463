//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Nodes are appended in evaluation order, so the tape is a topological
//! order by construction and the backward pass is a single reverse sweep
//! that visits each node once.

use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, RopeTable};
use super::{Matrix, Real};
use crate::error::{Error, Result};

/// Label sentinel for positions excluded from the loss.
pub const IGN: i64 = -1;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Detach,
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, inv: Vec<T> },
    Rope { x: Var, table: Arc<RopeTable>, positions: Vec<usize> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<(usize, usize)>,
        probs: Vec<Vec<T>>,
    },
    Gather { table: Var, ids: Vec<usize> },
    Concat(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy {
        logits: Var,
        labels: Vec<i64>,
        lse: Vec<T>,
        norm: T,
    },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a computation for one backward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a · b`, or `a · bᵀ` when `transpose_b`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let inner = if transpose_b { bv.cols() } else { bv.rows() };
        if av.cols() != inner {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?} (transpose_b={transpose_b})", av.shape(), bv.shape()),
            ));
        }
        let value = kernels::matmul(av, false, bv, transpose_b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, tb: transpose_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Matrix::from_vec(av.rows(), av.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Sum of all entries as a 1×1 matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Identity on values, zero on gradients.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise RMS normalization; `gain` is `1 × cols`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if gv.rows() != 1 || gv.cols() != xv.cols() {
            return Err(Error::shape("rms_norm", format!("gain {:?} for {:?}", gv.shape(), xv.shape())));
        }
        let (value, inv) = kernels::rms_norm(xv, gv.data(), eps);
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv }, rg))
    }

    /// Rotary phase for each row at the given absolute position.
    pub fn rope(&mut self, x: Var, table: &Arc<RopeTable>, positions: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if positions.len() != xv.rows() || xv.cols() % table.head_dim() != 0 {
            return Err(Error::shape("rope", format!("{:?} with {} positions", xv.shape(), positions.len())));
        }
        if let Some(&p) = positions.iter().max() {
            if p >= table.max_len() {
                return Err(Error::LengthOverflow {
                    len: p + 1,
                    max_len: table.max_len(),
                });
            }
        }
        let value = table.apply(xv, &positions, false);
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Rope {
                x,
                table: Arc::clone(table),
                positions,
            },
            rg,
        ))
    }

    /// Causal self-attention applied independently to each `(start, len)`
    /// row segment.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<(usize, usize)>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.cols() % heads != 0 {
            return Err(Error::shape("attention", format!("{:?}/{:?}/{:?}", qv.shape(), kv.shape(), vv.shape())));
        }
        let covered: usize = segments.iter().map(|s| s.1).sum();
        if covered != qv.rows() || segments.iter().any(|&(s, n)| s + n > qv.rows()) {
            return Err(Error::shape("attention", "segments do not tile the rows"));
        }
        let mut out = Matrix::zeros(qv.rows(), qv.cols());
        let mut probs = Vec::with_capacity(segments.len());
        for &(start, n) in &segments {
            probs.push(kernels::attention_forward(
                qv, start, n, kv, vv, start, n, 0, heads, &mut out, start,
            ));
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
            rg,
        ))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut value = Matrix::zeros(ids.len(), tv.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(Error::TokenOutOfRange { id, vocab: tv.rows() });
            }
            value.row_mut(i).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let mut value = Matrix::zeros(rows.len(), xv.cols());
        for (i, &r) in rows.iter().enumerate() {
            if r >= xv.rows() {
                return Err(Error::shape("select_rows", format!("row {r} of {}", xv.rows())));
            }
            value.row_mut(i).copy_from_slice(xv.row(r));
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::SelectRows { x, rows }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        self.select_rows(x, (start..start + count).collect())
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Matrix::from_vec(xv.rows(), xv.cols(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Dropout { x, mask }, rg)
    }

    /// `Σ_{labels[i] ≠ IGN} −log softmax(logits_i)[labels[i]] / normalizer`.
    ///
    /// With `normalizer = None` the sum is divided by the number of
    /// supervised rows; an all-IGN label set yields zero loss.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64], normalizer: Option<T>) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() || lv.rows() == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), lv.rows()),
            ));
        }
        if lv.data().iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("logits"));
        }
        let vocab = lv.cols();
        let mut count = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            if y == IGN {
                continue;
            }
            if y < 0 || y as usize >= vocab {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    position: i,
                    vocab,
                });
            }
            count += 1;
        }
        let mut lse = vec![T::zero(); labels.len()];
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            if y == IGN {
                continue;
            }
            let row = lv.row(i);
            let l = kernels::log_sum_exp(row);
            lse[i] = l;
            total += l - row[y as usize];
        }
        let norm = match normalizer {
            Some(n) => n,
            None => T::of(count.max(1) as f64),
        };
        let value = Matrix::filled(1, 1, if count == 0 { T::zero() } else { total / norm });
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                lse,
                norm,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar output; returns gradients of every
    /// differentiable leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::shape("backward", "output must be 1x1"));
        }
        let mut grads: Vec<Option<Matrix<T>>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        let mut leaves: Vec<Option<Matrix<T>>> = Vec::new();
        leaves.resize_with(output.0 + 1, || None);
        if !self.rg(output) {
            return Ok(Gradients { grads: leaves });
        }
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, idx, g, &mut grads, &mut leaves);
        }
        Ok(Gradients { grads: leaves })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Matrix<T>>], v: Var) -> &'g mut Matrix<T> {
        let (r, c) = self.value(v).shape();
        grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
    }

    fn propagate(
        &self,
        node: &Node<T>,
        idx: usize,
        g: Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
        leaves: &mut [Option<Matrix<T>>],
    ) {
        match &node.op {
            Op::Leaf => {
                if node.requires_grad {
                    leaves[idx] = Some(g);
                }
            }
            Op::Detach => {}
            Op::MatMul { a, b, tb } => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    kernels::matmul_acc(&g, false, bv, !tb, self.buf(grads, *a));
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    if *tb {
                        kernels::matmul_acc(&g, true, av, false, self.buf(grads, *b));
                    } else {
                        kernels::matmul_acc(av, true, &g, false, self.buf(grads, *b));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        self.buf(grads, v).add_assign(&g);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.rg(v) {
                        let ov = self.value(other).data().to_vec();
                        let buf = self.buf(grads, v);
                        for ((o, &gg), &x) in buf.data_mut().iter_mut().zip(g.data()).zip(&ov) {
                            *o += gg * x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    let buf = self.buf(grads, *a);
                    for (o, &gg) in buf.data_mut().iter_mut().zip(g.data()) {
                        *o += gg * *s;
                    }
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let s = g.get(0, 0);
                    for o in self.buf(grads, *a).data_mut() {
                        *o += s;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let xv = self.value(*a).data().to_vec();
                    let buf = self.buf(grads, *a);
                    for ((o, &gg), &x) in buf.data_mut().iter_mut().zip(g.data()).zip(&xv) {
                        *o += gg * kernels::gelu_grad(x);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data().to_vec();
                let mut dgain = if self.rg(*gain) {
                    Some(vec![T::zero(); gv.len()])
                } else {
                    None
                };
                if self.rg(*x) {
                    let mut dx = grads[x.0].take().unwrap_or_else(|| Matrix::zeros(xv.rows(), xv.cols()));
                    kernels::rms_norm_backward(xv, &gv, inv, &g, Some(&mut dx), dgain.as_deref_mut());
                    grads[x.0] = Some(dx);
                } else {
                    kernels::rms_norm_backward(xv, &gv, inv, &g, None, dgain.as_deref_mut());
                }
                if let Some(dg) = dgain {
                    let buf = self.buf(grads, *gain);
                    for (o, v) in buf.data_mut().iter_mut().zip(dg) {
                        *o += v;
                    }
                }
            }
            Op::Rope { x, table, positions } => {
                if self.rg(*x) {
                    let dx = table.apply(&g, positions, true);
                    self.buf(grads, *x).add_assign(&dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (r, c) = qv.shape();
                let mut dq = Matrix::zeros(r, c);
                let mut dk = Matrix::zeros(r, c);
                let mut dv = Matrix::zeros(r, c);
                for (&(start, n), p) in segments.iter().zip(probs) {
                    kernels::attention_backward(qv, kv, vv, start, n, *heads, p, &g, &mut dq, &mut dk, &mut dv);
                }
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.rg(var) {
                        self.buf(grads, var).add_assign(&d);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let buf = self.buf(grads, *table);
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, &gg) in buf.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += gg;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut row = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    if self.rg(p) {
                        let buf = self.buf(grads, p);
                        for i in 0..n {
                            for (o, &gg) in buf.row_mut(i).iter_mut().zip(g.row(row + i)) {
                                *o += gg;
                            }
                        }
                    }
                    row += n;
                }
            }
            Op::SelectRows { x, rows } => {
                if self.rg(*x) {
                    let buf = self.buf(grads, *x);
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &gg) in buf.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += gg;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.rg(*x) {
                    let buf = self.buf(grads, *x);
                    for ((o, &gg), &m) in buf.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *o += gg * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                lse,
                norm,
            } => {
                if self.rg(*logits) {
                    let scale = g.get(0, 0) / *norm;
                    let lv = self.value(*logits);
                    let (r, c) = lv.shape();
                    let buf = grads[logits.0].get_or_insert_with(|| Matrix::zeros(r, c));
                    for (i, &y) in labels.iter().enumerate() {
                        if y == IGN {
                            continue;
                        }
                        let l = lse[i];
                        let row = lv.row(i);
                        let out = buf.row_mut(i);
                        for (j, o) in out.iter_mut().enumerate() {
                            let p = (row[j] - l).exp();
                            let t = if j == y as usize { T::one() } else { T::zero() };
                            *o += (p - t) * scale;
                        }
                    }
                }
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when no path reaches it.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient of a leaf, or zeros of the given shape when unreached.
    pub fn take_or_zeros(&mut self, v: Var, rows: usize, cols: usize) -> Matrix<T> {
        self.take(v).unwrap_or_else(|| Matrix::zeros(rows, cols))
    }
}
