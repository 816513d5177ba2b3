//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Operations
//! append nodes in execution order, so node indices are already a topological
//! order and [`Graph::backward`] is a single reverse sweep.
//!
//! Matrices are the working currency: most ops view their operands as
//! `rows × cols` over the last axis. Broadcasting is limited to a scalar times a
//! tensor and a row-wise bias add; every other shape change is an explicit op.

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Exp(Var),
    Transpose2d(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    L2Normalize { x: Var, denom: Vec<T>, clamped: Vec<bool> },
    Mean(Var),
    Sum(Var),
    SumLastdim(Var),
    Gather { table: Var, ids: Vec<usize> },
    RowScale { x: Var, factors: Vec<T>, rows_per_factor: usize },
    GroupMean { x: Var, group: usize },
    Attention { qkv: Var, batch: usize, tokens: usize, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward/backward context. Not shared across threads while recording.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ── dense kernels ────────────────────────────────────────────────────

/// `c = alpha * op(a) op(b) + beta * c`; `a` is `m×k` (stored `k×m` when
/// `ta`), `b` is `k×n` (stored `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides describe the stated layouts.
    unsafe {
        T::gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn softmax_rows_in_place<T: Scalar>(buf: &mut [T], cols: usize) {
    for row in buf.chunks_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        for v in row.iter_mut() {
            *v = (*v - max).exp_fast();
        }
        let inv = T::one() / row.iter().copied().sum::<T>();
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let u = c * (x + k * x * x * x);
    x / (T::one() + (-(u + u)).exp_fast())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let u = c * (x + k * x * x * x);
    // 0.5·(1 + tanh u) written as a logistic in 2u
    let s = T::one() / (T::one() + (-(u + u)).exp_fast());
    s + (x + x) * s * (T::one() - s) * c * (T::one() + T::of(3.0) * k * x * x)
}

// Small dense kernels for per-head attention blocks, where a general GEMM
// spends most of its time packing.

const TILE: usize = 16;

/// `c = a · b` with `a: m×k`, `b: k×n`, all contiguous; output columns are
/// processed in register-resident panels of `TILE`, then of `TILE / 2`.
fn mm_small<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let full = n / TILE * TILE;
    let half = if n - full >= TILE / 2 { full + TILE / 2 } else { full };
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        let ci = &mut c[i * n..(i + 1) * n];
        for j0 in (0..full).step_by(TILE) {
            panel::<T, TILE>(ai, b, n, j0, &mut ci[j0..j0 + TILE]);
        }
        if half > full {
            panel::<T, { TILE / 2 }>(ai, b, n, full, &mut ci[full..half]);
        }
        for j in half..n {
            let mut s = T::zero();
            for (p, &ap) in ai.iter().enumerate() {
                s += ap * b[p * n + j];
            }
            ci[j] = s;
        }
    }
}

#[inline(always)]
fn panel<T: Scalar, const W: usize>(ai: &[T], b: &[T], n: usize, j0: usize, out: &mut [T]) {
    let mut acc = [T::zero(); W];
    for (p, &ap) in ai.iter().enumerate() {
        let bp: &[T; W] = b[p * n + j0..p * n + j0 + W].try_into().expect("tile");
        for t in 0..W {
            acc[t] += ap * bp[t];
        }
    }
    out.copy_from_slice(&acc);
}

/// Copies the `rows × cols` block starting at `src[0]` with row stride `stride`.
fn gather_block<T: Scalar>(src: &[T], stride: usize, rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        dst[r * cols..(r + 1) * cols].copy_from_slice(&src[r * stride..r * stride + cols]);
    }
}

fn transpose_into<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

fn scatter_block<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T], stride: usize) {
    for r in 0..rows {
        dst[r * stride..r * stride + cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: accumulates a gradient on backward.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never accumulates a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::from_vec(self.shape(v), g.clone()).expect("grad matches value shape"))
    }

    /// Drops accumulated gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.rows_cols()
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` with `w` stored `in × out` and `b` of length `out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (r, d_in) = self.mat(x, "linear")?;
        let (d_in2, d_out) = self.mat(w, "linear")?;
        if d_in != d_in2 {
            return Err(Error::dim("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![T::zero(); r * d_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != d_out {
                return Err(Error::dim("linear bias", self.shape(w), self.shape(b)));
            }
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv);
            }
        }
        gemm(r, d_in, d_out, T::one(), self.value(x).data(), false, self.value(w).data(), false, T::one(), &mut out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_vec(&[r, d_out], out)?, Op::Linear { x, w, b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds `bias` (length = cols) to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(x);
        if self.value(bias).numel() != cols {
            return Err(Error::dim("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let bv = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            add_into(row, bv);
        }
        let t = Tensor::from_vec(self.shape(x), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRowBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = Tensor::from_vec(self.shape(x), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Scale(x, c), rg))
    }

    /// `x * s` where `s` holds a single element.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("mul_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = Tensor::from_vec(self.shape(x), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::MulScalar(x, s), rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.exp()).collect();
        let t = Tensor::from_vec(self.shape(x), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Exp(x), rg))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat(x, "transpose2d")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[c, r], out)?, Op::Transpose2d(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let t = Tensor::from_vec(shape, self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.mat(x, "slice_rows")?;
        if start > end || end > r {
            return Err(Error::dim("slice_rows", self.shape(x), &[start, end]));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let t = Tensor::from_vec(&[end - start, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let (_, c) = self.mat(first, "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, c2) = self.mat(x, "concat_rows")?;
            if c2 != c {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(x)));
            }
            rows += r;
            data.extend_from_slice(self.value(x).data());
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::from_vec(&[rows, c], data)?, Op::ConcatRows(xs.to_vec()), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu_fwd(v)).collect();
        let t = Tensor::from_vec(self.shape(x), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gelu(x), rg))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(x);
        let mut data = self.value(x).data().to_vec();
        softmax_rows_in_place(&mut data, c);
        let t = Tensor::from_vec(self.shape(x), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Row-wise layer normalization with population variance, then `gamma ⊙ · + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layernorm eps must be positive, got {eps}")));
        }
        let (rows, c) = self.rows_cols(x);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim("layernorm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::of(eps);
        let inv_c = T::one() / T::of(c as f64);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let xh = &mut xhat[r * c..(r + 1) * c];
            let o = &mut out[r * c..(r + 1) * c];
            for j in 0..c {
                xh[j] = (row[j] - mean) * rs;
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let t = Tensor::from_vec(self.shape(x), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn l2_normalize_lastdim(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("l2_normalize eps must be positive, got {eps}")));
        }
        let (rows, c) = self.rows_cols(x);
        let eps = T::of(eps);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); rows * c];
        let mut denom = vec![T::zero(); rows];
        let mut clamped = vec![false; rows];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = if norm > eps { norm } else { eps };
            clamped[r] = !(norm > eps);
            denom[r] = d;
            for j in 0..c {
                out[r * c + j] = row[j] / d;
            }
        }
        let t = Tensor::from_vec(self.shape(x), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::L2Normalize { x, denom, clamped }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let s = self.value(x).data().iter().copied().sum::<T>() / T::of(n as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// Row sums; output has shape `[rows]`.
    pub fn sum_lastdim(&mut self, x: Var) -> Result<Var> {
        let (rows, c) = self.rows_cols(x);
        let data: Vec<T> = self.value(x).data().chunks(c.max(1)).map(|r| r.iter().copied().sum()).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[rows], data)?, Op::SumLastdim(x), rg))
    }

    /// Gathers rows of `table` (`n × cols`) by index; repeated ids are allowed.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, c) = self.mat(table, "embedding_lookup")?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= n {
                return Err(Error::OutOfRange { index: i, limit: n });
            }
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::from_vec(&[ids.len(), c], out)?, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Multiplies each consecutive run of `rows_per_factor` rows by one constant factor.
    pub fn row_scale(&mut self, x: Var, factors: &[f64], rows_per_factor: usize) -> Result<Var> {
        let (rows, c) = self.rows_cols(x);
        if rows_per_factor == 0 || factors.len() * rows_per_factor != rows {
            return Err(Error::dim("row_scale", self.shape(x), &[factors.len(), rows_per_factor]));
        }
        let factors: Vec<T> = factors.iter().map(|&f| T::of(f)).collect();
        let mut data = self.value(x).data().to_vec();
        for (r, row) in data.chunks_mut(c).enumerate() {
            let f = factors[r / rows_per_factor];
            for v in row {
                *v = *v * f;
            }
        }
        let t = Tensor::from_vec(self.shape(x), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::RowScale { x, factors, rows_per_factor }, rg))
    }

    /// Mean over consecutive groups of `group` rows: `(g·group) × c → g × c`.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, c) = self.mat(x, "group_mean_rows")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::dim("group_mean_rows", self.shape(x), &[group]));
        }
        let groups = rows / group;
        let inv = T::one() / T::of(group as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); groups * c];
        for gi in 0..groups {
            let o = &mut out[gi * c..(gi + 1) * c];
            for r in 0..group {
                add_into(o, &xv[(gi * group + r) * c..(gi * group + r + 1) * c]);
            }
            for v in o.iter_mut() {
                *v = *v * inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[groups, c], out)?, Op::GroupMean { x, group }, rg))
    }

    /// Fused multi-head self-attention over packed `qkv` rows.
    ///
    /// `qkv` is `(batch·tokens) × 3·width` laid out `[q | k | v]`, each split into
    /// `heads` contiguous head slices. Scores use `1/sqrt(head_dim)` scaling.
    /// Output is `(batch·tokens) × width`.
    pub fn attention(&mut self, qkv: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let (rows, c3) = self.mat(qkv, "attention")?;
        if rows != batch * tokens || c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(Error::dim("attention", self.shape(qkv), &[batch, tokens, heads]));
        }
        let width = c3 / 3;
        let dh = width / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qv = self.value(qkv).data();
        let tt = tokens * tokens;
        let blk = tokens * dh;
        let mut probs = vec![T::zero(); batch * heads * tt];
        let mut out = vec![T::zero(); rows * width];
        let (mut q, mut k, mut kt, mut v, mut o) = (vec![T::zero(); blk], vec![T::zero(); blk], vec![T::zero(); blk], vec![T::zero(); blk], vec![T::zero(); blk]);
        for b in 0..batch {
            let base = b * tokens * c3;
            for h in 0..heads {
                gather_block(&qv[base + h * dh..], c3, tokens, dh, &mut q);
                gather_block(&qv[base + width + h * dh..], c3, tokens, dh, &mut k);
                gather_block(&qv[base + 2 * width + h * dh..], c3, tokens, dh, &mut v);
                for x in q.iter_mut() {
                    *x = *x * scale;
                }
                transpose_into(&k, tokens, dh, &mut kt);
                let p = &mut probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                mm_small(&q, &kt, p, tokens, dh, tokens);
                softmax_rows_in_place(p, tokens);
                mm_small(p, &v, &mut o, tokens, tokens, dh);
                scatter_block(&o, tokens, dh, &mut out[b * tokens * width + h * dh..], width);
            }
        }
        let rg = self.rg(qkv);
        Ok(self.push(Tensor::from_vec(&[rows, width], out)?, Op::Attention { qkv, batch, tokens, heads, probs }, rg))
    }

    /// Mean softmax cross-entropy of `logits` (`rows × classes`) against labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, c) = self.mat(logits, "softmax_cross_entropy")?;
        if labels.len() != rows || rows == 0 {
            return Err(Error::dim("softmax_cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::OutOfRange { index: bad, limit: c });
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[label];
        }
        softmax_rows_in_place(&mut probs, c);
        let loss = loss / T::of(rows as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// `x ⊙ mask` with an inverted-dropout mask drawn from `rng`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Prng) -> Result<Var> {
        let mask = dropout_mask::<T>(self.shape(x), p, rng)?;
        let m = self.constant(mask);
        self.mul(x, m)
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => add_into(existing, &g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Populates gradients of every trainable leaf with respect to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("gradients already populated; call reset_grads first".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        if !self.rg(loss) {
            return Err(Error::Backward("loss is detached from every trainable leaf".into()));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(gout);
                continue;
            }
            for (v, g) in self.node_backward(i, &gout) {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, gout: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.rows_cols(*a);
                let n = self.rows_cols(*b).1;
                if need(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), gout, false, val(*b), true, T::zero(), &mut ga);
                    out.push((*a, ga));
                }
                if need(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), val(*a), true, gout, false, T::zero(), &mut gb);
                    out.push((*b, gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (r, d_in) = self.rows_cols(*x);
                let d_out = self.rows_cols(*w).1;
                if need(*x) {
                    let mut gx = vec![T::zero(); r * d_in];
                    gemm(r, d_out, d_in, T::one(), gout, false, val(*w), true, T::zero(), &mut gx);
                    out.push((*x, gx));
                }
                if need(*w) {
                    let mut gw = vec![T::zero(); d_in * d_out];
                    gemm(d_in, r, d_out, T::one(), val(*x), true, gout, false, T::zero(), &mut gw);
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    if need(*b) {
                        let mut gb = vec![T::zero(); d_out];
                        for row in gout.chunks(d_out) {
                            add_into(&mut gb, row);
                        }
                        out.push((*b, gb));
                    }
                }
            }
            Op::Add(a, b) => {
                out.push((*a, gout.to_vec()));
                out.push((*b, gout.to_vec()));
            }
            Op::AddRowBias(x, bias) => {
                out.push((*x, gout.to_vec()));
                if need(*bias) {
                    let c = self.value(*bias).numel();
                    let mut gb = vec![T::zero(); c];
                    for row in gout.chunks(c) {
                        add_into(&mut gb, row);
                    }
                    out.push((*bias, gb));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    out.push((*a, gout.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect()));
                }
                if need(*b) {
                    out.push((*b, gout.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Scale(x, c) => out.push((*x, gout.iter().map(|&g| g * *c).collect())),
            Op::MulScalar(x, s) => {
                let c = self.value(*s).item();
                if need(*x) {
                    out.push((*x, gout.iter().map(|&g| g * c).collect()));
                }
                if need(*s) {
                    let gs = gout.iter().zip(val(*x)).map(|(&g, &v)| g * v).sum::<T>();
                    out.push((*s, vec![gs]));
                }
            }
            Op::Exp(x) => out.push((*x, gout.iter().zip(node.value.data()).map(|(&g, &y)| g * y).collect())),
            Op::Transpose2d(x) => {
                let (r, c) = self.rows_cols(*x);
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gout[j * r + i];
                    }
                }
                out.push((*x, gx));
            }
            Op::Reshape(x) => out.push((*x, gout.to_vec())),
            Op::SliceRows { x, start } => {
                let (r, c) = self.rows_cols(*x);
                let mut gx = vec![T::zero(); r * c];
                gx[start * c..start * c + gout.len()].copy_from_slice(gout);
                out.push((*x, gx));
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    if need(x) {
                        out.push((x, gout[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::Gelu(x) => out.push((*x, gout.iter().zip(val(*x)).map(|(&g, &v)| g * gelu_grad(v)).collect())),
            Op::Softmax(x) => {
                let (_, c) = self.rows_cols(*x);
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for ((gr, yr), o) in gout.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot = gr.iter().zip(yr).map(|(&g, &p)| g * p).sum::<T>();
                    for j in 0..c {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, gx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, c) = self.rows_cols(*x);
                let g = val(*gamma);
                if need(*x) {
                    let inv_c = T::one() / T::of(c as f64);
                    let mut gx = vec![T::zero(); rows * c];
                    let mut dxh = vec![T::zero(); c];
                    for r in 0..rows {
                        let gr = &gout[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            dxh[j] = gr[j] * g[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xh[j];
                        }
                        m1 = m1 * inv_c;
                        m2 = m2 * inv_c;
                        let o = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            o[j] = rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    out.push((*x, gx));
                }
                if need(*gamma) {
                    let mut gg = vec![T::zero(); c];
                    for (gr, xh) in gout.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * xh[j];
                        }
                    }
                    out.push((*gamma, gg));
                }
                if need(*beta) {
                    let mut gb = vec![T::zero(); c];
                    for gr in gout.chunks(c) {
                        add_into(&mut gb, gr);
                    }
                    out.push((*beta, gb));
                }
            }
            Op::L2Normalize { x, denom, clamped } => {
                let (_, c) = self.rows_cols(*x);
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for r in 0..denom.len() {
                    let gr = &gout[r * c..(r + 1) * c];
                    let yr = &y[r * c..(r + 1) * c];
                    let o = &mut gx[r * c..(r + 1) * c];
                    let inv = T::one() / denom[r];
                    if clamped[r] {
                        for j in 0..c {
                            o[j] = gr[j] * inv;
                        }
                    } else {
                        let dot = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<T>();
                        for j in 0..c {
                            o[j] = (gr[j] - yr[j] * dot) * inv;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                out.push((*x, vec![gout[0] / T::of(n as f64); n]));
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                out.push((*x, vec![gout[0]; n]));
            }
            Op::SumLastdim(x) => {
                let (_, c) = self.rows_cols(*x);
                let mut gx = Vec::with_capacity(self.value(*x).numel());
                for &g in gout {
                    gx.extend(std::iter::repeat_n(g, c));
                }
                out.push((*x, gx));
            }
            Op::Gather { table, ids } => {
                let (n, c) = self.rows_cols(*table);
                let mut gt = vec![T::zero(); n * c];
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * c..(id + 1) * c], &gout[r * c..(r + 1) * c]);
                }
                out.push((*table, gt));
            }
            Op::RowScale { x, factors, rows_per_factor } => {
                let (_, c) = self.rows_cols(*x);
                let mut gx = gout.to_vec();
                for (r, row) in gx.chunks_mut(c).enumerate() {
                    let f = factors[r / rows_per_factor];
                    for v in row {
                        *v = *v * f;
                    }
                }
                out.push((*x, gx));
            }
            Op::GroupMean { x, group } => {
                let (rows, c) = self.rows_cols(*x);
                let inv = T::one() / T::of(*group as f64);
                let mut gx = vec![T::zero(); rows * c];
                for r in 0..rows {
                    let src = &gout[(r / group) * c..(r / group + 1) * c];
                    for j in 0..c {
                        gx[r * c + j] = src[j] * inv;
                    }
                }
                out.push((*x, gx));
            }
            Op::Attention { qkv, batch, tokens, heads, probs } => {
                out.push((*qkv, self.attention_backward(*qkv, *batch, *tokens, *heads, probs, gout)));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (rows, c) = self.rows_cols(*logits);
                let scale = gout[0] / T::of(rows as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * c + l] -= scale;
                }
                out.push((*logits, gl));
            }
        }
        out
    }

    fn attention_backward(&self, qkv: Var, batch: usize, tokens: usize, heads: usize, probs: &[T], gout: &[T]) -> Vec<T> {
        let c3 = self.rows_cols(qkv).1;
        let width = c3 / 3;
        let dh = width / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qv = self.value(qkv).data();
        let tt = tokens * tokens;
        let blk = tokens * dh;
        let mut gqkv = vec![T::zero(); qv.len()];
        let mut dp = vec![T::zero(); tt];
        let mut tr = vec![T::zero(); tt];
        let z = || vec![T::zero(); blk];
        let (mut q, mut k, mut v, mut vt, mut go) = (z(), z(), z(), z(), z());
        let (mut gq, mut gk, mut gv) = (z(), z(), z());
        for b in 0..batch {
            let base = b * tokens * c3;
            for h in 0..heads {
                let p = &probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                gather_block(&gout[b * tokens * width + h * dh..], width, tokens, dh, &mut go);
                gather_block(&qv[base + h * dh..], c3, tokens, dh, &mut q);
                gather_block(&qv[base + width + h * dh..], c3, tokens, dh, &mut k);
                gather_block(&qv[base + 2 * width + h * dh..], c3, tokens, dh, &mut v);
                transpose_into(&v, tokens, dh, &mut vt);
                // dP = dO · Vᵀ
                mm_small(&go, &vt, &mut dp, tokens, dh, tokens);
                // dV = Pᵀ · dO
                transpose_into(p, tokens, tokens, &mut tr);
                mm_small(&tr, &go, &mut gv, tokens, tokens, dh);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
                for r in 0..tokens {
                    let pr = &p[r * tokens..(r + 1) * tokens];
                    let dr = &mut dp[r * tokens..(r + 1) * tokens];
                    let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..tokens {
                        dr[j] = scale * pr[j] * (dr[j] - dot);
                    }
                }
                // dQ = dS · K, dK = dSᵀ · Q
                mm_small(&dp, &k, &mut gq, tokens, tokens, dh);
                transpose_into(&dp, tokens, tokens, &mut tr);
                mm_small(&tr, &q, &mut gk, tokens, tokens, dh);
                scatter_block(&gq, tokens, dh, &mut gqkv[base + h * dh..], c3);
                scatter_block(&gk, tokens, dh, &mut gqkv[base + width + h * dh..], c3);
                scatter_block(&gv, tokens, dh, &mut gqkv[base + 2 * width + h * dh..], c3);
            }
        }
        gqkv
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<T: Scalar>(shape: &[usize], p: f64, rng: &mut Prng) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability must be in [0,1), got {p}")));
    }
    let keep = T::of(1.0 / (1.0 - p));
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| if rng.bernoulli(p) { T::zero() } else { keep }).collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::eye(3));
        let a = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn uniform_softmax() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[0.0; 4]));
        let y = g.softmax_lastdim(x).unwrap();
        for &v in g.value(y).data() {
            assert!(close(v, 0.25, 1e-15));
        }
    }

    #[test]
    fn layernorm_hand_row() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let gamma = g.constant(t(&[3], &[1.0; 3]));
        let beta = g.constant(t(&[3], &[0.0; 3]));
        let y = g.layernorm(x, gamma, beta, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!(close(v[0], -1.2247, 1e-4));
        assert!(close(v[1], 0.0, 1e-12));
        assert!(close(v[2], 1.2247, 1e-4));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 0.0, 9.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_twice_requires_reset() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Backward(_))));
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(g.backward(y).is_err());
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let s = g.sum(c).unwrap();
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn constants_never_accumulate() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn non_finite_propagates() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[f64::NAN, 1.0]));
        let y = g.gelu(x).unwrap();
        assert!(g.value(y).data()[0].is_nan());
    }

    #[test]
    fn dropout_mask_values() {
        let mut rng = Prng::new(3, 3);
        let m = dropout_mask::<f64>(&[1000], 0.25, &mut rng).unwrap();
        for &v in m.data() {
            assert!(v == 0.0 || close(v, 1.0 / 0.75, 1e-12));
        }
        assert!(dropout_mask::<f64>(&[3], 1.0, &mut rng).is_err());
    }

    #[test]
    fn l2_normalize_zero_row_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0]));
        let y = g.l2_normalize_lastdim(x, 1e-8).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        use crate::gradcheck::gradcheck;
        // 17 tokens spans one full register tile plus a remainder column
        let (batch, tokens, width) = (2, 17, 8);
        let mut r = Prng::new(5, 0);
        let x = Tensor::from_vec(&[batch * tokens, 3 * width], (0..batch * tokens * 3 * width).map(|_| r.normal()).collect()).unwrap();
        let w = Tensor::from_vec(&[batch * tokens, width], (0..batch * tokens * width).map(|_| r.normal()).collect()).unwrap();
        let rep = gradcheck(
            |g, v| {
                let a = g.attention(v, batch, tokens, 2)?;
                let c = g.constant(w.clone());
                let m = g.mul(a, c)?;
                g.sum(m)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
