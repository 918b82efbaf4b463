//! Shared forward/backward kernels.
//!
//! The tape and the cached inference session both call into these so that
//! eval-mode outputs agree bit for bit between the two paths.

use super::{Matrix, Real};

/// Strided operand: `data[offset + i*rs + j*cs]` for `i < rows`, `j < cols`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T: Real> View<'a, T> {
    pub fn of(m: &'a Matrix<T>) -> Self {
        Self {
            data: m.data(),
            offset: 0,
            rows: m.rows(),
            cols: m.cols(),
            rs: m.cols(),
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    /// Rows `r0..r0+rows`, columns `c0..c0+cols` of a row-major matrix.
    pub fn block(m: &'a Matrix<T>, r0: usize, rows: usize, c0: usize, cols: usize) -> Self {
        Self {
            data: m.data(),
            offset: r0 * m.cols() + c0,
            rows,
            cols,
            rs: m.cols(),
            cs: 1,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

pub(crate) struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T: Real> ViewMut<'a, T> {
    pub fn of(m: &'a mut Matrix<T>) -> Self {
        let (rows, cols) = m.shape();
        Self {
            data: m.data_mut(),
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn block(m: &'a mut Matrix<T>, r0: usize, rows: usize, c0: usize, cols: usize) -> Self {
        let stride = m.cols();
        Self {
            data: m.data_mut(),
            offset: r0 * stride + c0,
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }
}

/// `C ← α·A·B + β·C`.
pub(crate) fn gemm<T: Real>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output shape");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "strided output out of bounds");
    } else {
        return;
    }
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Plain `A·B` (optionally transposed operands).
pub(crate) fn matmul<T: Real>(a: &Matrix<T>, ta: bool, b: &Matrix<T>, tb: bool) -> Matrix<T> {
    let av = if ta { View::of(a).t() } else { View::of(a) };
    let bv = if tb { View::of(b).t() } else { View::of(b) };
    let mut c = Matrix::zeros(av.rows, bv.cols);
    gemm(T::one(), av, bv, T::zero(), ViewMut::of(&mut c));
    c
}

/// Accumulating `C += op(A)·op(B)`.
pub(crate) fn matmul_acc<T: Real>(a: &Matrix<T>, ta: bool, b: &Matrix<T>, tb: bool, c: &mut Matrix<T>) {
    let av = if ta { View::of(a).t() } else { View::of(a) };
    let bv = if tb { View::of(b).t() } else { View::of(b) };
    gemm(T::one(), av, bv, T::one(), ViewMut::of(c));
}

/// Row-wise RMS normalization with a learned gain. Returns the output and
/// the per-row inverse RMS needed by the backward pass.
pub(crate) fn rms_norm<T: Real>(x: &Matrix<T>, gain: &[T], eps: f64) -> (Matrix<T>, Vec<T>) {
    let d = x.cols();
    let mut y = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    let eps = T::of(eps);
    let dn = T::of(d as f64);
    for i in 0..x.rows() {
        let row = x.row(i);
        let mut ss = T::zero();
        for &v in row {
            ss += v * v;
        }
        let r = T::one() / (ss / dn + eps).sqrt();
        inv.push(r);
        for ((o, &v), &g) in y.row_mut(i).iter_mut().zip(row).zip(gain) {
            *o = v * r * g;
        }
    }
    (y, inv)
}

pub(crate) fn rms_norm_backward<T: Real>(
    x: &Matrix<T>,
    gain: &[T],
    inv: &[T],
    dy: &Matrix<T>,
    dx: Option<&mut Matrix<T>>,
    dgain: Option<&mut [T]>,
) {
    let d = x.cols();
    let dn = T::of(d as f64);
    if let Some(dg) = dgain {
        for i in 0..x.rows() {
            let r = inv[i];
            for ((g, &v), &gy) in dg.iter_mut().zip(x.row(i)).zip(dy.row(i)) {
                *g += gy * v * r;
            }
        }
    }
    if let Some(dx) = dx {
        for i in 0..x.rows() {
            let r = inv[i];
            let row = x.row(i);
            let gy = dy.row(i);
            let mut dot = T::zero();
            for j in 0..d {
                dot += gain[j] * gy[j] * row[j];
            }
            let c = r * r * r * dot / dn;
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o += r * gain[j] * gy[j] - c * row[j];
            }
        }
    }
}

/// Precomputed rotary phases for positions `0..max_len`.
#[derive(Debug, Clone)]
pub struct RopeTable {
    head_dim: usize,
    max_len: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(head_dim: usize, max_len: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for p in 0..max_len {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let (s, c) = (p as f64 * freq).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Self {
            head_dim,
            max_len,
            cos,
            sin,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Rotates every head of every row by its position's phase; `inverse`
    /// applies the transpose rotation (the backward map).
    pub(crate) fn apply<T: Real>(&self, x: &Matrix<T>, positions: &[usize], inverse: bool) -> Matrix<T> {
        let hd = self.head_dim;
        let half = hd / 2;
        let heads = x.cols() / hd;
        let mut y = Matrix::zeros(x.rows(), x.cols());
        for (i, &p) in positions.iter().enumerate() {
            let cs = &self.cos[p * half..(p + 1) * half];
            let sn = &self.sin[p * half..(p + 1) * half];
            let src = x.row(i);
            let dst = y.row_mut(i);
            for h in 0..heads {
                let o = h * hd;
                for j in 0..half {
                    let c = T::of(cs[j]);
                    let s = if inverse { -T::of(sn[j]) } else { T::of(sn[j]) };
                    let a = src[o + j];
                    let b = src[o + j + half];
                    dst[o + j] = a * c - b * s;
                    dst[o + j + half] = a * s + b * c;
                }
            }
        }
        y
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

/// Causal multi-head attention for one sequence.
///
/// Query row `r` sits at absolute position `q_offset + r` and sees keys
/// `0..=q_offset + r`. Outputs are written into rows `out_row0..` of `out`;
/// the softmax weights are returned as `heads × nq × nk`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward<T: Real>(
    q: &Matrix<T>,
    q_row0: usize,
    nq: usize,
    k: &Matrix<T>,
    v: &Matrix<T>,
    kv_row0: usize,
    nk: usize,
    q_offset: usize,
    heads: usize,
    out: &mut Matrix<T>,
    out_row0: usize,
) -> Vec<T> {
    let d = q.cols();
    let hd = d / heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut probs = vec![T::zero(); heads * nq * nk];
    for h in 0..heads {
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        let mut scores = Matrix::zeros(nq, nk);
        gemm(
            scale,
            View::block(q, q_row0, nq, h * hd, hd),
            View::block(k, kv_row0, nk, h * hd, hd).t(),
            T::zero(),
            ViewMut::of(&mut scores),
        );
        for r in 0..nq {
            let valid = (q_offset + r + 1).min(nk);
            let srow = &scores.row(r)[..valid];
            let mut mx = T::neg_infinity();
            for &s in srow {
                mx = mx.max(s);
            }
            let prow = &mut p[r * nk..r * nk + valid];
            let mut sum = T::zero();
            for (o, &s) in prow.iter_mut().zip(srow) {
                let e = (s - mx).exp();
                *o = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for o in prow.iter_mut() {
                *o *= inv;
            }
        }
        let pm = View {
            data: &*p,
            offset: 0,
            rows: nq,
            cols: nk,
            rs: nk,
            cs: 1,
        };
        gemm(
            T::one(),
            pm,
            View::block(v, kv_row0, nk, h * hd, hd),
            T::zero(),
            ViewMut::block(out, out_row0, nq, h * hd, hd),
        );
    }
    probs
}

/// Backward of [`attention_forward`] for a full self-attention segment
/// (`nq == nk`, `q_offset == 0`). Gradients are accumulated into the given
/// row blocks of `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    row0: usize,
    n: usize,
    heads: usize,
    probs: &[T],
    dout: &Matrix<T>,
    dq: &mut Matrix<T>,
    dk: &mut Matrix<T>,
    dv: &mut Matrix<T>,
) {
    let d = q.cols();
    let hd = d / heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    for h in 0..heads {
        let p = &probs[h * n * n..(h + 1) * n * n];
        let pv = View {
            data: p,
            offset: 0,
            rows: n,
            cols: n,
            rs: n,
            cs: 1,
        };
        let dov = View::block(dout, row0, n, h * hd, hd);
        // dV += Pᵀ·dO
        gemm(T::one(), pv.t(), dov, T::one(), ViewMut::block(dv, row0, n, h * hd, hd));
        // dP = dO·Vᵀ
        let mut dp = Matrix::zeros(n, n);
        gemm(
            T::one(),
            dov,
            View::block(v, row0, n, h * hd, hd).t(),
            T::zero(),
            ViewMut::of(&mut dp),
        );
        // dS = P ∘ (dP − rowsum(P ∘ dP)), scaled
        let mut ds = Matrix::zeros(n, n);
        for r in 0..n {
            let prow = &p[r * n..r * n + r + 1];
            let dprow = &dp.row(r)[..r + 1];
            let mut dot = T::zero();
            for (&a, &b) in prow.iter().zip(dprow) {
                dot += a * b;
            }
            for (j, o) in ds.row_mut(r)[..r + 1].iter_mut().enumerate() {
                *o = prow[j] * (dprow[j] - dot) * scale;
            }
        }
        gemm(
            T::one(),
            View::of(&ds),
            View::block(k, row0, n, h * hd, hd),
            T::one(),
            ViewMut::block(dq, row0, n, h * hd, hd),
        );
        gemm(
            T::one(),
            View::of(&ds).t(),
            View::block(q, row0, n, h * hd, hd),
            T::one(),
            ViewMut::block(dk, row0, n, h * hd, hd),
        );
    }
}

/// Numerically stable `log Σ exp(row)`.
pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mut mx = T::neg_infinity();
    for &x in row {
        mx = mx.max(x);
    }
    let mut s = T::zero();
    for &x in row {
        s += (x - mx).exp();
    }
    mx + s.ln()
}
