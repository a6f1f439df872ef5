//! Forward semantics of the differentiable building blocks.
//!
//! These are plain functions over [`Matrix`] values. The tape in
//! [`crate::tape`] reuses them for node values and adds the backward passes.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_t, Matrix, Real};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `out[t, j] = Σ_k x[t, k] · w[k, j] + b[j]`
pub fn linear<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Result<Matrix<T>> {
    if b.len() != w.cols() {
        return Err(Error::dim("linear bias", w.shape(), (1, b.len())));
    }
    let mut out = matmul(x, w).map_err(|_| Error::dim("linear", x.shape(), w.shape()))?;
    add_row_in_place(&mut out, b);
    Ok(out)
}

pub(crate) fn add_row_in_place<T: Real>(m: &mut Matrix<T>, b: &[T]) {
    for r in 0..m.rows() {
        for (o, &bv) in m.row_mut(r).iter_mut().zip(b) {
            *o = *o + bv;
        }
    }
}

/// Row statistics kept by the tape for the layer-norm backward pass.
pub(crate) struct LayerNormCache<T> {
    pub xhat: Matrix<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_cached<T: Real>(
    x: &Matrix<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Matrix<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::dim("layer_norm", x.shape(), (1, gamma.len())));
    }
    if !(eps > T::zero()) {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let n = T::lit(d as f64);
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let xh = xhat.row(r).to_vec();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = xh[j] * gamma[j] + beta[j];
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

/// Standardizes each row to zero mean and unit variance, then scales and shifts.
pub fn layer_norm<T: Real>(x: &Matrix<T>, gamma: &[T], beta: &[T], eps: T) -> Result<Matrix<T>> {
    layer_norm_cached(x, gamma, beta, eps).map(|(out, _)| out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

pub fn relu<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Multi-head attention weights. Head `h` uses columns `h·dh .. (h+1)·dh` of the
/// query, key and value projections.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub wq: Matrix<T>,
    pub bq: Vec<T>,
    pub wk: Matrix<T>,
    pub bk: Vec<T>,
    pub wv: Matrix<T>,
    pub bv: Vec<T>,
    pub wo: Matrix<T>,
    pub bo: Vec<T>,
    pub heads: usize,
}

impl<T: Real> AttentionParams<T> {
    pub fn width(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    /// All projections identity, all biases zero.
    pub fn identity(width: usize, heads: usize) -> Self {
        let eye = Matrix::identity(width);
        let zero = vec![T::zero(); width];
        Self {
            wq: eye.clone(),
            bq: zero.clone(),
            wk: eye.clone(),
            bk: zero.clone(),
            wv: eye.clone(),
            bv: zero.clone(),
            wo: eye,
            bo: zero,
            heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        check_heads(d, self.heads)?;
        for w in [&self.wq, &self.wk, &self.wv, &self.wo] {
            w.require_shape("attention projection", d, d)?;
        }
        for b in [&self.bq, &self.bk, &self.bv, &self.bo] {
            if b.len() != d {
                return Err(Error::dim("attention bias", (d, d), (1, b.len())));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_heads(width: usize, heads: usize) -> Result<()> {
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "width {width} is not divisible by head count {heads}"
        )));
    }
    Ok(())
}

pub(crate) fn slice_cols<T: Real>(x: &Matrix<T>, start: usize, len: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), len);
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
    }
    out
}

/// Each query row attends over the key/value rows; heads are concatenated and
/// passed through the output projection. Self-attention is `queries_src == keys_vals_src`.
pub fn multi_head_attention<T: Real>(
    queries_src: &Matrix<T>,
    keys_vals_src: &Matrix<T>,
    params: &AttentionParams<T>,
) -> Result<Matrix<T>> {
    params.validate()?;
    let d = params.width();
    if queries_src.cols() != d || keys_vals_src.cols() != d {
        return Err(Error::dim(
            "multi_head_attention",
            queries_src.shape(),
            keys_vals_src.shape(),
        ));
    }
    let q = linear(queries_src, &params.wq, &params.bq)?;
    let k = linear(keys_vals_src, &params.wk, &params.bk)?;
    let v = linear(keys_vals_src, &params.wv, &params.bv)?;
    let dh = params.head_dim();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut concat = Matrix::zeros(queries_src.rows(), d);
    for h in 0..params.heads {
        let qh = slice_cols(&q, h * dh, dh);
        let kh = slice_cols(&k, h * dh, dh);
        let vh = slice_cols(&v, h * dh, dh);
        let scores = matmul_t(&qh, &kh)?.map(|s| s * scale);
        let attn = softmax_rows(&scores);
        let out = matmul(&attn, &vh)?;
        for r in 0..out.rows() {
            concat.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(out.row(r));
        }
    }
    linear(&concat, &params.wo, &params.bo)
}

/// Global average pooling over token rows.
pub fn gap<T: Real>(tokens: &Matrix<T>) -> Result<Vec<T>> {
    if tokens.rows() == 0 {
        return Err(Error::EmptyInput("gap"));
    }
    let n = T::lit(tokens.rows() as f64);
    let mut out = vec![T::zero(); tokens.cols()];
    for r in 0..tokens.rows() {
        for (o, &v) in out.iter_mut().zip(tokens.row(r)) {
            *o = *o + v;
        }
    }
    for o in &mut out {
        *o = *o / n;
    }
    Ok(out)
}

/// Alternating linear and ReLU; the last layer has no activation.
pub fn relu_mlp<T: Real>(x: &[T], layers: &[(Matrix<T>, Vec<T>)]) -> Result<Vec<T>> {
    let mut h = Matrix::row_vector(x);
    for (i, (w, b)) in layers.iter().enumerate() {
        h = linear(&h, w, b)?;
        if i + 1 < layers.len() {
            h = relu(&h);
        }
    }
    Ok(h.into_vec())
}

pub fn l2_normalize<T: Real>(v: &[T]) -> Result<Vec<T>> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(v.iter().map(|&x| x / norm).collect())
}
