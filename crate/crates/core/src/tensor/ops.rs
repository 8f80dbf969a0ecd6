//! Differentiable ops: forward definitions on [`Tensor`] and their backward
//! rules.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn, sigmoid};
use super::Tensor;
use crate::{Error, Result, Scalar};

pub(crate) enum Op<T: Scalar> {
    MatMul { m: usize, k: usize, n: usize },
    /// `a[m,k] · b[n,k]ᵀ`
    MatMulNt { m: usize, k: usize, n: usize },
    Add,
    Mul,
    AddRow { cols: usize },
    MulRow { cols: usize },
    Scale(T),
    Gelu,
    Silu,
    Tanh,
    Glu { half: usize },
    Softmax { cols: usize },
    LayerNorm { cols: usize, xhat: Vec<T>, rstd: Vec<T> },
    DepthwiseConv { steps: usize, channels: usize, taps: usize },
    Dropout { mask: Vec<T> },
    ConcatRows { cols: usize },
    ConcatCols { rows: usize, widths: Vec<usize> },
    SliceRows { start: usize, cols: usize },
    SliceCols { start: usize, width: usize, cols: usize },
    MeanRows { start: usize, end: usize, cols: usize },
    Reshape,
    Transpose { rows: usize, cols: usize },
    Sum,
    BceWithLogits { targets: Vec<T> },
    CrossEntropy { probs: Vec<T>, target: usize },
    Mse { targets: Vec<T> },
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = matrix_dims(self, "matmul")?;
        let (k2, n) = matrix_dims(rhs, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, &self.data(), &rhs.data(), &mut out);
        Ok(Tensor::from_op(out, vec![m, n], Op::MatMul { m, k, n }, vec![self.clone(), rhs.clone()]))
    }

    /// `self · rhsᵀ`, i.e. a linear map with `rhs` stored as `[out, in]`.
    pub fn matmul_nt(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = matrix_dims(self, "matmul_nt")?;
        let (n, k2) = matrix_dims(rhs, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(), rhs.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, &self.data(), &rhs.data(), &mut out);
        Ok(Tensor::from_op(out, vec![m, n], Op::MatMulNt { m, k, n }, vec![self.clone(), rhs.clone()]))
    }

    /// `x · Wᵀ + b` with `W: [out, in]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let y = self.matmul_nt(weight)?;
        match bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("add", self.shape(), rhs.shape()));
        }
        let out = self.data().iter().zip(rhs.data().iter()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Add, vec![self.clone(), rhs.clone()]))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("mul", self.shape(), rhs.shape()));
        }
        let out = self.data().iter().zip(rhs.data().iter()).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Mul, vec![self.clone(), rhs.clone()]))
    }

    /// Adds a `[cols]` vector to every row.
    pub fn add_row(&self, row: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, cols) = self.rows_cols();
        if row.numel() != cols {
            return Err(Error::shape("add_row", self.shape(), row.shape()));
        }
        let r = row.data();
        let out = self.data().iter().enumerate().map(|(i, &v)| v + r[i % cols]).collect();
        drop(r);
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::AddRow { cols }, vec![self.clone(), row.clone()]))
    }

    /// Multiplies every row elementwise by a `[cols]` vector.
    pub fn mul_row(&self, row: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, cols) = self.rows_cols();
        if row.numel() != cols {
            return Err(Error::shape("mul_row", self.shape(), row.shape()));
        }
        let r = row.data();
        let out = self.data().iter().enumerate().map(|(i, &v)| v * r[i % cols]).collect();
        drop(r);
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::MulRow { cols }, vec![self.clone(), row.clone()]))
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        let out = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Scale(c), vec![self.clone()])
    }

    pub fn gelu(&self) -> Tensor<T> {
        let out = self.data().iter().map(|&v| kernels::gelu(v)).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Gelu, vec![self.clone()])
    }

    pub fn silu(&self) -> Tensor<T> {
        let out = self.data().iter().map(|&v| v * sigmoid(v)).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Silu, vec![self.clone()])
    }

    pub fn tanh(&self) -> Tensor<T> {
        let out = self.data().iter().map(|&v| v.tanh()).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Tanh, vec![self.clone()])
    }

    /// Gated linear unit over the last axis: first half ⊙ σ(second half).
    pub fn glu(&self) -> Result<Tensor<T>> {
        let (rows, cols) = self.rows_cols();
        if cols % 2 != 0 || self.ndim() == 0 {
            return Err(Error::shape("glu", self.shape(), &[2 * (cols / 2 + 1)]));
        }
        let half = cols / 2;
        let x = self.data();
        let mut out = Vec::with_capacity(rows * half);
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            for j in 0..half {
                out.push(row[j] * sigmoid(row[half + j]));
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = half;
        Ok(Tensor::from_op(out, shape, Op::Glu { half }, vec![self.clone()]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor<T> {
        let (rows, cols) = self.rows_cols();
        let x = self.data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            kernels::softmax_row(&x[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        drop(x);
        Tensor::from_op(out, self.shape().to_vec(), Op::Softmax { cols }, vec![self.clone()])
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let (rows, cols) = self.rows_cols();
        if gamma.numel() != cols || beta.numel() != cols {
            return Err(Error::shape("layer_norm", self.shape(), gamma.shape()));
        }
        let eps = T::from_f64(eps);
        let n = T::from_usize(cols);
        let x = self.data();
        let (g, b) = (gamma.data(), beta.data());
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..cols {
                let h = (row[j] - mean) * s;
                xhat[r * cols + j] = h;
                out[r * cols + j] = g[j] * h + b[j];
            }
        }
        drop((x, g, b));
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm { cols, xhat, rstd },
            vec![self.clone(), gamma.clone(), beta.clone()],
        ))
    }

    /// Per-channel 1-D convolution over time with "same" padding.
    /// `self: [T, C]`, `kernel: [K, C]` with odd `K`, `bias: [C]`.
    pub fn depthwise_conv1d(&self, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (steps, channels) = matrix_dims(self, "depthwise_conv1d")?;
        let (taps, kc) = matrix_dims(kernel, "depthwise_conv1d")?;
        if kc != channels || taps % 2 == 0 || bias.numel() != channels {
            return Err(Error::shape("depthwise_conv1d", self.shape(), kernel.shape()));
        }
        let pad = taps / 2;
        let (x, w, b) = (self.data(), kernel.data(), bias.data());
        let mut out = vec![T::zero(); steps * channels];
        for t in 0..steps {
            let orow = &mut out[t * channels..(t + 1) * channels];
            orow.copy_from_slice(&b[..]);
            for j in 0..taps {
                let src = t + j;
                if src < pad || src - pad >= steps {
                    continue;
                }
                let xrow = &x[(src - pad) * channels..(src - pad + 1) * channels];
                let wrow = &w[j * channels..(j + 1) * channels];
                for c in 0..channels {
                    orow[c] += wrow[c] * xrow[c];
                }
            }
        }
        drop((x, w, b));
        Ok(Tensor::from_op(
            out,
            vec![steps, channels],
            Op::DepthwiseConv { steps, channels, taps },
            vec![self.clone(), kernel.clone(), bias.clone()],
        ))
    }

    /// Inverted dropout. At evaluation time this is the identity and returns
    /// `self` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, training: bool, rng: &mut R) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout_p", format!("{p} is outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Dropout { mask }, vec![self.clone()]))
    }

    /// Rows `start..start+len` of the `[rows, cols]` view.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (rows, cols) = matrix_dims(self, "slice_rows")?;
        if start + len > rows {
            return Err(Error::shape("slice_rows", self.shape(), &[start + len, cols]));
        }
        let out = self.data()[start * cols..(start + len) * cols].to_vec();
        Ok(Tensor::from_op(out, vec![len, cols], Op::SliceRows { start, cols }, vec![self.clone()]))
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor<T>> {
        let (rows, cols) = matrix_dims(self, "slice_cols")?;
        if start + width > cols {
            return Err(Error::shape("slice_cols", self.shape(), &[rows, start + width]));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&x[r * cols + start..r * cols + start + width]);
        }
        drop(x);
        Ok(Tensor::from_op(out, vec![rows, width], Op::SliceCols { start, width, cols }, vec![self.clone()]))
    }

    /// Mean over rows `start..end`, producing a `[cols]` vector.
    pub fn mean_rows(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let (rows, cols) = matrix_dims(self, "mean_rows")?;
        if start >= end || end > rows {
            return Err(Error::contract(format!("mean_rows: empty or out-of-range span {start}..{end} of {rows}")));
        }
        let x = self.data();
        let inv = T::one() / T::from_usize(end - start);
        let mut out = vec![T::zero(); cols];
        for r in start..end {
            kernels::add_assign(&mut out, &x[r * cols..(r + 1) * cols]);
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        drop(x);
        Ok(Tensor::from_op(out, vec![cols], Op::MeanRows { start, end, cols }, vec![self.clone()]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape, vec![self.clone()]))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (rows, cols) = matrix_dims(self, "transpose")?;
        let x = self.data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        drop(x);
        Ok(Tensor::from_op(out, vec![cols, rows], Op::Transpose { rows, cols }, vec![self.clone()]))
    }

    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum::<T>();
        Tensor::from_op(vec![s], Vec::new(), Op::Sum, vec![self.clone()])
    }

    /// Mean binary cross-entropy of independent sigmoids over all logits.
    pub fn bce_with_logits(&self, targets: &[T]) -> Result<Tensor<T>> {
        if targets.len() != self.numel() {
            return Err(Error::shape("bce_with_logits", self.shape(), &[targets.len()]));
        }
        let n = T::from_usize(targets.len());
        let loss = self
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln())
            .sum::<T>()
            / n;
        Ok(Tensor::from_op(
            vec![loss],
            Vec::new(),
            Op::BceWithLogits { targets: targets.to_vec() },
            vec![self.clone()],
        ))
    }

    /// Softmax cross-entropy of a single logit vector against a class index.
    pub fn cross_entropy(&self, target: usize) -> Result<Tensor<T>> {
        let n = self.numel();
        if target >= n {
            return Err(Error::contract(format!("class {target} out of range for {n} logits")));
        }
        let mut probs = vec![T::zero(); n];
        kernels::softmax_row(&self.data(), &mut probs);
        let z = self.data();
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let loss = lse - z[target];
        drop(z);
        Ok(Tensor::from_op(vec![loss], Vec::new(), Op::CrossEntropy { probs, target }, vec![self.clone()]))
    }

    /// Mean squared error.
    pub fn mse(&self, targets: &[T]) -> Result<Tensor<T>> {
        if targets.len() != self.numel() {
            return Err(Error::shape("mse", self.shape(), &[targets.len()]));
        }
        let n = T::from_usize(targets.len());
        let loss = self.data().iter().zip(targets).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n;
        Ok(Tensor::from_op(vec![loss], Vec::new(), Op::Mse { targets: targets.to_vec() }, vec![self.clone()]))
    }
}

/// Stacks matrices with equal column count along rows.
pub fn concat_rows<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
    let (_, cols) = matrix_dims(first, "concat_rows")?;
    let mut rows = 0;
    for p in parts {
        let (r, c) = matrix_dims(p, "concat_rows")?;
        if c != cols {
            return Err(Error::shape("concat_rows", first.shape(), p.shape()));
        }
        rows += r;
    }
    let mut out = Vec::with_capacity(rows * cols);
    for p in parts {
        out.extend_from_slice(&p.data());
    }
    Ok(Tensor::from_op(out, vec![rows, cols], Op::ConcatRows { cols }, parts.to_vec()))
}

/// Joins matrices with equal row count side by side.
pub fn concat_cols<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
    let (rows, _) = matrix_dims(first, "concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = matrix_dims(p, "concat_cols")?;
        if r != rows {
            return Err(Error::shape("concat_cols", first.shape(), p.shape()));
        }
        widths.push(c);
    }
    let cols: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    Ok(Tensor::from_op(out, vec![rows, cols], Op::ConcatCols { rows, widths }, parts.to_vec()))
}

/// Scaled dot-product multi-head attention.
///
/// `q: [T, d]`, `k, v: [S, d]`. When `extra` is given, its `[P, d]` key and
/// value rows are placed in front of `k` and `v`; the query side and the
/// output length are unaffected.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
    extra: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<Tensor<T>> {
    let (_, d) = matrix_dims(q, "attention")?;
    if k.shape() != v.shape() || matrix_dims(k, "attention")?.1 != d {
        return Err(Error::shape("attention", k.shape(), v.shape()));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::invalid("n_heads", format!("{n_heads} does not divide {d}")));
    }
    let (k, v) = match extra {
        None => (k.clone(), v.clone()),
        Some((ek, ev)) => {
            if ek.shape() != ev.shape() {
                return Err(Error::contract(format!(
                    "prefix keys {:?} and values {:?} differ",
                    ek.shape(),
                    ev.shape()
                )));
            }
            (concat_rows(&[ek.clone(), k.clone()])?, concat_rows(&[ev.clone(), v.clone()])?)
        }
    };
    let dh = d / n_heads;
    let inv_sqrt = 1.0 / libm::sqrt(dh as f64);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (q.slice_cols(h * dh, dh)?, k.slice_cols(h * dh, dh)?, v.slice_cols(h * dh, dh)?)
        };
        let weights = qh.matmul_nt(&kh)?.scale(inv_sqrt).softmax();
        heads.push(weights.matmul(&vh)?);
    }
    if n_heads == 1 {
        Ok(heads.pop().unwrap())
    } else {
        concat_cols(&heads)
    }
}

impl<T: Scalar> Op<T> {
    /// Input gradients given the output gradient `g`. Entries are `None` for
    /// inputs that do not require grad.
    pub(crate) fn backward(&self, out: &Tensor<T>, g: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let need = |i: usize| inputs[i].requires_grad();
        match self {
            Op::MatMul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let mut ga = None;
                let mut gb = None;
                if need(0) {
                    let mut d = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, g, &inputs[1].data(), &mut d);
                    ga = Some(d);
                }
                if need(1) {
                    let mut d = vec![T::zero(); k * n];
                    gemm_tn(m, k, n, &inputs[0].data(), g, &mut d);
                    gb = Some(d);
                }
                vec![ga, gb]
            }
            Op::MatMulNt { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let mut ga = None;
                let mut gb = None;
                if need(0) {
                    let mut d = vec![T::zero(); m * k];
                    gemm_nn(m, n, k, g, &inputs[1].data(), &mut d);
                    ga = Some(d);
                }
                if need(1) {
                    let mut d = vec![T::zero(); n * k];
                    gemm_tn(m, n, k, g, &inputs[0].data(), &mut d);
                    gb = Some(d);
                }
                vec![ga, gb]
            }
            Op::Add => vec![need(0).then(|| g.to_vec()), need(1).then(|| g.to_vec())],
            Op::Mul => {
                let ga = need(0).then(|| g.iter().zip(inputs[1].data().iter()).map(|(&a, &b)| a * b).collect());
                let gb = need(1).then(|| g.iter().zip(inputs[0].data().iter()).map(|(&a, &b)| a * b).collect());
                vec![ga, gb]
            }
            Op::AddRow { cols } => {
                let grow = need(1).then(|| column_sums(g, *cols));
                vec![need(0).then(|| g.to_vec()), grow]
            }
            Op::MulRow { cols } => {
                let cols = *cols;
                let gx = need(0).then(|| {
                    let r = inputs[1].data();
                    g.iter().enumerate().map(|(i, &v)| v * r[i % cols]).collect()
                });
                let grow = need(1).then(|| {
                    let x = inputs[0].data();
                    let mut d = vec![T::zero(); cols];
                    for (i, (&gv, &xv)) in g.iter().zip(x.iter()).enumerate() {
                        d[i % cols] += gv * xv;
                    }
                    d
                });
                vec![gx, grow]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|&v| v * *c).collect())],
            Op::Gelu => {
                let x = inputs[0].data();
                vec![Some(g.iter().zip(x.iter()).map(|(&gv, &xv)| gv * kernels::gelu_grad(xv)).collect())]
            }
            Op::Silu => {
                let x = inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(&gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * s * (T::one() + xv * (T::one() - s))
                        })
                        .collect(),
                )]
            }
            Op::Tanh => {
                let y = out.data();
                vec![Some(g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect())]
            }
            Op::Glu { half } => {
                let half = *half;
                let cols = 2 * half;
                let x = inputs[0].data();
                let rows = g.len() / half;
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for j in 0..half {
                        let a = x[r * cols + j];
                        let s = sigmoid(x[r * cols + half + j]);
                        let gv = g[r * half + j];
                        d[r * cols + j] = gv * s;
                        d[r * cols + half + j] = gv * a * s * (T::one() - s);
                    }
                }
                vec![Some(d)]
            }
            Op::Softmax { cols } => {
                let cols = *cols;
                let y = out.data();
                let mut d = vec![T::zero(); g.len()];
                for r in 0..g.len() / cols.max(1) {
                    let span = r * cols..(r + 1) * cols;
                    let dot: T = g[span.clone()].iter().zip(&y[span.clone()]).map(|(&a, &b)| a * b).sum();
                    for i in span {
                        d[i] = y[i] * (g[i] - dot);
                    }
                }
                vec![Some(d)]
            }
            Op::LayerNorm { cols, xhat, rstd } => {
                let cols = *cols;
                let n = T::from_usize(cols);
                let gamma = inputs[1].data();
                let gx = need(0).then(|| {
                    let mut d = vec![T::zero(); g.len()];
                    for (r, &s) in rstd.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..cols {
                            let dh = g[r * cols + j] * gamma[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * cols + j];
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        for (j, i) in span.enumerate() {
                            let dh = g[i] * gamma[j];
                            d[i] = s * (dh - mean_dh - xhat[i] * mean_dh_h);
                        }
                    }
                    d
                });
                let ggamma = need(1).then(|| {
                    let mut d = vec![T::zero(); cols];
                    for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        d[i % cols] += gv * h;
                    }
                    d
                });
                let gbeta = need(2).then(|| column_sums(g, cols));
                vec![gx, ggamma, gbeta]
            }
            Op::DepthwiseConv { steps, channels, taps } => {
                let (steps, channels, taps) = (*steps, *channels, *taps);
                let pad = taps / 2;
                let x = inputs[0].data();
                let w = inputs[1].data();
                let mut gx = vec![T::zero(); steps * channels];
                let mut gw = vec![T::zero(); taps * channels];
                for t in 0..steps {
                    let grow = &g[t * channels..(t + 1) * channels];
                    for j in 0..taps {
                        let src = t + j;
                        if src < pad || src - pad >= steps {
                            continue;
                        }
                        let s = src - pad;
                        for c in 0..channels {
                            gx[s * channels + c] += grow[c] * w[j * channels + c];
                            gw[j * channels + c] += grow[c] * x[s * channels + c];
                        }
                    }
                }
                vec![need(0).then_some(gx), need(1).then_some(gw), need(2).then(|| column_sums(g, channels))]
            }
            Op::Dropout { mask } => vec![Some(g.iter().zip(mask).map(|(&a, &m)| a * m).collect())],
            Op::ConcatRows { cols } => {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|p| {
                        let len = p.rows_cols().0 * cols;
                        let part = p.requires_grad().then(|| g[offset..offset + len].to_vec());
                        offset += len;
                        part
                    })
                    .collect()
            }
            Op::ConcatCols { rows, widths } => {
                let cols: usize = widths.iter().sum();
                let mut offset = 0;
                inputs
                    .iter()
                    .zip(widths)
                    .map(|(p, &w)| {
                        let part = p.requires_grad().then(|| {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..*rows {
                                d.extend_from_slice(&g[r * cols + offset..r * cols + offset + w]);
                            }
                            d
                        });
                        offset += w;
                        part
                    })
                    .collect()
            }
            Op::SliceRows { start, cols } => {
                let mut d = vec![T::zero(); inputs[0].numel()];
                d[start * cols..start * cols + g.len()].copy_from_slice(g);
                vec![Some(d)]
            }
            Op::SliceCols { start, width, cols } => {
                let mut d = vec![T::zero(); inputs[0].numel()];
                for r in 0..g.len() / width.max(&1) {
                    d[r * cols + start..r * cols + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                vec![Some(d)]
            }
            Op::MeanRows { start, end, cols } => {
                let inv = T::one() / T::from_usize(end - start);
                let mut d = vec![T::zero(); inputs[0].numel()];
                for r in *start..*end {
                    for c in 0..*cols {
                        d[r * cols + c] = g[c] * inv;
                    }
                }
                vec![Some(d)]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Transpose { rows, cols } => {
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        d[r * cols + c] = g[c * rows + r];
                    }
                }
                vec![Some(d)]
            }
            Op::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
            Op::BceWithLogits { targets } => {
                let n = T::from_usize(targets.len());
                let z = inputs[0].data();
                vec![Some(z.iter().zip(targets).map(|(&zv, &t)| g[0] * (sigmoid(zv) - t) / n).collect())]
            }
            Op::CrossEntropy { probs, target } => {
                let mut d: Vec<T> = probs.iter().map(|&p| p * g[0]).collect();
                d[*target] -= g[0];
                vec![Some(d)]
            }
            Op::Mse { targets } => {
                let n = T::from_usize(targets.len());
                let two = T::from_f64(2.0);
                let p = inputs[0].data();
                vec![Some(p.iter().zip(targets).map(|(&pv, &t)| g[0] * two * (pv - t) / n).collect())]
            }
        }
    }
}

fn column_sums<T: Scalar>(g: &[T], cols: usize) -> Vec<T> {
    let mut d = vec![T::zero(); cols];
    for (i, &v) in g.iter().enumerate() {
        d[i % cols] += v;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let m = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(eye.matmul(&m).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let row = t(&[1.0, 2.0], &[1, 2]);
        let col = t(&[3.0, 4.0], &[2, 1]);
        assert_eq!(row.matmul(&col).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(&[0.0; 6], &[2, 3]);
        let b = t(&[0.0; 4], &[2, 2]);
        match a.matmul(&b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry_shift_and_direct_formula() {
        assert_eq!(t(&[0.0, 0.0], &[2]).softmax().to_vec(), vec![0.5, 0.5]);
        let base = t(&[1.0, 2.0, 3.0], &[3]).softmax().to_vec();
        let shifted = t(&[101.0, 102.0, 103.0], &[3]).softmax().to_vec();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for i in 0..3 {
            let direct = ((i + 1) as f64).exp() / z;
            assert!((base[i] - direct).abs() < 1e-12);
            assert!((base[i] - shifted[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let ones = t(&[1.0; 4], &[4]);
        let zeros = t(&[0.0; 4], &[4]);
        let constant = t(&[5.0; 4], &[1, 4]);
        assert_eq!(constant.layer_norm(&ones, &zeros, 1e-5).unwrap().to_vec(), vec![0.0; 4]);

        let b = t(&[0.5, -1.0, 2.0, 3.0], &[4]);
        let x = t(&[0.3, -2.0, 7.0, 1.0], &[1, 4]);
        assert_eq!(x.layer_norm(&zeros, &b, 1e-5).unwrap().to_vec(), b.to_vec());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 10.0 - 3.0).collect();
        let g1 = t(&[1.0; 64], &[64]);
        let b0 = t(&[0.0; 64], &[64]);
        let y = t(&row, &[1, 64]).layer_norm(&g1, &b0, 1e-5).unwrap().to_vec();
        let mean = y.iter().sum::<f64>() / 64.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-4);
    }

    #[test]
    fn elementwise_definitions() {
        assert_eq!(t(&[0.0], &[1]).gelu().to_vec(), vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = t(&[1.0, -2.0, 3.0, 0.5], &[2, 2]);
        assert!(x.dropout(0.5, false, &mut rng).unwrap().ptr_eq(&x));
        // glu on [a, b] = a * sigmoid(b)
        let y = t(&[2.0, 0.0], &[1, 2]).glu().unwrap().to_vec();
        assert_eq!(y, vec![1.0]);
        assert!(t(&[1.0, 2.0, 3.0], &[1, 3]).glu().is_err());
    }

    #[test]
    fn dropout_training_scales_survivors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = t(&[1.0; 1000], &[1000]);
        let y = x.dropout(0.5, true, &mut rng).unwrap().to_vec();
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = y.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
        assert!(x.dropout(1.0, true, &mut rng).is_err());
    }

    #[test]
    fn depthwise_unit_impulse_is_identity() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let kernel = t(&[0.0, 0.0, 1.0, 1.0, 0.0, 0.0], &[3, 2]);
        let bias = t(&[0.0, 0.0], &[2]);
        assert_eq!(x.depthwise_conv1d(&kernel, &bias).unwrap().to_vec(), x.to_vec());
        let even = t(&[0.0; 4], &[2, 2]);
        assert!(x.depthwise_conv1d(&even, &bias).is_err());
    }

    #[test]
    fn sum_of_linear_map_has_broadcast_gradient() {
        // loss = sum(W · x) with W: [3, 2], x: [2, 1] => dW[i, j] = x[j]
        let w = Tensor::<f64>::param(vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6], &[3, 2]).unwrap();
        let x = t(&[1.5, -2.5], &[2, 1]);
        let unused = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        w.matmul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.5, -2.5, 1.5, -2.5, 1.5, -2.5]);
        assert!(unused.grad().is_none());
    }

    #[test]
    fn prefix_lengths_must_agree() {
        let q = t(&[0.0; 4], &[1, 4]);
        let ek = t(&[0.0; 8], &[2, 4]);
        let ev = t(&[0.0; 4], &[1, 4]);
        assert!(matches!(attention(&q, &q, &q, 1, Some((&ek, &ev))), Err(Error::Contract(_))));
    }

    #[test]
    fn single_head_single_prefix_matches_two_way_softmax() {
        let q = t(&[1.0, 0.5], &[1, 2]);
        let k = t(&[0.2, -0.4], &[1, 2]);
        let v = t(&[3.0, 1.0], &[1, 2]);
        let pk = t(&[1.0, 1.0], &[1, 2]);
        let pv = t(&[-1.0, 2.0], &[1, 2]);
        let out = attention(&q, &k, &v, 1, Some((&pk, &pv))).unwrap().to_vec();
        let s_prefix = (1.0 * 1.0 + 0.5 * 1.0) / 2f64.sqrt();
        let s_seq = (1.0 * 0.2 + 0.5 * -0.4) / 2f64.sqrt();
        let w_prefix = s_prefix.exp() / (s_prefix.exp() + s_seq.exp());
        let w_seq = 1.0 - w_prefix;
        let expected = [-w_prefix + w_seq * 3.0, w_prefix * 2.0 + w_seq * 1.0];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
