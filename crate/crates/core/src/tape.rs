//! Reverse-mode differentiation over matrix operations.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients. Leaves may borrow their value
//! (parameters) or own it (inputs, perturbed copies).

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::ops::{self, LayerNormCache};
use crate::tensor::{matmul, matmul_t, t_matmul, Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        cache: LayerNormCache<T>,
    },
    MeanRows(Var),
    L2NormRows {
        x: Var,
        norms: Vec<T>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    WeightedSum(Var, Matrix<T>),
}

struct Node<'a, T: Real> {
    value: Cow<'a, Matrix<T>>,
    op: Op<T>,
}

pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf)
    }

    pub fn leaf_ref(&mut self, value: &'a Matrix<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).as_slice()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_t(self.value(a), self.value(b))?;
        Ok(self.push(Cow::Owned(out), Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(Cow::Owned(out), Op::Add(a, b)))
    }

    /// Adds a 1×c row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        if self.shape(row) != (1, xc) {
            return Err(Error::dim("add_row", (xr, xc), self.shape(row)));
        }
        let mut out = self.value(x).clone();
        ops::add_row_in_place(&mut out, self.value(row).as_slice());
        Ok(self.push(Cow::Owned(out), Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(Cow::Owned(out), Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(Cow::Owned(out), Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = ops::softmax_rows(self.value(x));
        self.push(Cow::Owned(out), Op::Softmax(x))
    }

    /// Layer norm with learnable 1×d `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.shape(x).1;
        if self.shape(beta) != (1, d) {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(beta)));
        }
        let (scaled, cache) =
            ops::layer_norm_cached(self.value(x), self.value(gamma).as_slice(), &vec![T::zero(); d], eps)?;
        let scaled = self.push(Cow::Owned(scaled), Op::LayerNorm { x, gamma, cache });
        // beta is a separate node so its gradient is a plain column sum
        self.add_row(scaled, beta)
    }

    /// Mean over rows: T×d → 1×d.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let pooled = ops::gap(self.value(x))?;
        Ok(self.push(Cow::Owned(Matrix::row_vector(&pooled)), Op::MeanRows(x)))
    }

    /// Normalizes each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let mut out = src.clone();
        let mut norms = Vec::with_capacity(src.rows());
        for r in 0..src.rows() {
            let normalized = ops::l2_normalize(src.row(r))?;
            norms.push(src.row(r).iter().map(|&v| v * v).sum::<T>().sqrt());
            out.row_mut(r).copy_from_slice(&normalized);
        }
        Ok(self.push(Cow::Owned(out), Op::L2NormRows { x, norms }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::dim("slice_cols", (r, c), (start, start + len)));
        }
        let out = ops::slice_cols(self.value(x), start, len);
        Ok(self.push(Cow::Owned(out), Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or(Error::EmptyInput("concat_cols"))?;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::dim("concat_cols", (rows, cols), self.shape(p)));
            }
            cols += self.shape(p).1;
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        Ok(self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or(Error::EmptyInput("concat_rows"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(Error::dim("concat_rows", (rows, cols), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).as_slice());
            rows += self.shape(p).0;
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(Cow::Owned(out), Op::ConcatRows(parts.to_vec())))
    }

    /// Scalar `Σ w ∘ x` for a constant weight matrix.
    pub fn weighted_sum(&mut self, x: Var, weights: Matrix<T>) -> Result<Var> {
        if weights.shape() != self.shape(x) {
            return Err(Error::dim("weighted_sum", self.shape(x), weights.shape()));
        }
        let total = crate::tensor::dot(self.value(x).as_slice(), weights.as_slice());
        Ok(self.push(Cow::Owned(Matrix::filled(1, 1, total)), Op::WeightedSum(x, weights)))
    }

    /// A scalar node whose value is `value` and whose derivative with respect to
    /// `x` is `grad`. Used for losses computed outside the tape.
    pub fn external_loss(&mut self, x: Var, value: T, grad: Matrix<T>) -> Result<Var> {
        let node = self.weighted_sum(x, grad)?;
        self.nodes[node.0].value = Cow::Owned(Matrix::filled(1, 1, value));
        Ok(node)
    }

    /// `x · W + b` with `b` a 1×dout row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self
            .matmul(x, w)
            .map_err(|_| Error::dim("linear", self.shape(x), self.shape(w)))?;
        self.add_row(h, b)
    }

    /// Smallest `|x|` over the inputs of every ReLU on the tape (the distance to
    /// the nearest kink), or `None` without ReLUs.
    pub fn relu_margin(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => self.nodes[x.0].value.as_slice().iter().map(|v| v.abs()).reduce(T::min),
                _ => None,
            })
            .reduce(T::min)
    }

    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        if self.shape(out) != (1, 1) {
            return Err(Error::dim("backward", self.shape(out), (1, 1)));
        }
        self.backward_seeded(out, Matrix::filled(1, 1, T::one()))
    }

    /// Propagates an arbitrary upstream gradient `seed` from `out`.
    pub fn backward_seeded(&self, out: Var, seed: Matrix<T>) -> Result<Grads<T>> {
        if seed.shape() != self.shape(out) {
            return Err(Error::dim("backward_seeded", self.shape(out), seed.shape()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, matmul_t(g, self.value(*b))?);
                accumulate(grads, *b, t_matmul(self.value(*a), g)?);
            }
            Op::MatMulT(a, b) => {
                accumulate(grads, *a, matmul(g, self.value(*b))?);
                accumulate(grads, *b, t_matmul(g, self.value(*a))?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                accumulate(grads, *x, g.clone());
                accumulate(grads, *row, column_sums(g));
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.map(|v| v * *s)),
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner = crate::tensor::dot(yr, gr);
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[j] * (gr[j] - inner);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, cache } => {
                let gv = self.value(*gamma).as_slice();
                let (rows, d) = cache.xhat.shape();
                let n = T::lit(d as f64);
                let mut dx = Matrix::zeros(rows, d);
                let mut dgamma = Matrix::zeros(1, d);
                for r in 0..rows {
                    let xh = cache.xhat.row(r);
                    let gr = g.row(r);
                    let dxhat: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                    let sum_dxhat: T = dxhat.iter().copied().sum();
                    let sum_dxhat_xhat = crate::tensor::dot(&dxhat, xh);
                    let scale = cache.inv_std[r] / n;
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = scale * (n * dxhat[j] - sum_dxhat - xh[j] * sum_dxhat_xhat);
                    }
                    for (j, o) in dgamma.as_mut_slice().iter_mut().enumerate() {
                        *o = *o + gr[j] * xh[j];
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.shape(*x);
                let inv = T::one() / T::lit(rows as f64);
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    for (o, &v) in dx.row_mut(r).iter_mut().zip(g.as_slice()) {
                        *o = v * inv;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::L2NormRows { x, norms } => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner = crate::tensor::dot(yr, gr);
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[j] - yr[j] * inner) / norm;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SliceCols(x, start) => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    accumulate(grads, p, ops::slice_cols(g, offset, w));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let chunk = g.as_slice()[offset * cols..(offset + rows) * cols].to_vec();
                    accumulate(grads, p, Matrix::from_vec(rows, cols, chunk)?);
                    offset += rows;
                }
            }
            Op::WeightedSum(x, w) => {
                let s = g.as_slice()[0];
                accumulate(grads, *x, w.map(|v| v * s));
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Real>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o = *o + v;
        }
    }
    out
}

/// Gradients produced by one backward pass.
pub struct Grads<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix<T> {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}
