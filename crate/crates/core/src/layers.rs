//! Parameter layouts for the transformer sublayers and their tape forward passes.

use rand::Rng;

use crate::error::Result;
use crate::ops::{self, AttentionParams};
use crate::params::{init_weight, Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Matrix, Real};

fn row_param<T: Real>(m: &Matrix<T>) -> Vec<T> {
    m.as_slice().to_vec()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayout {
    pub w: ParamId,
    pub b: ParamId,
}

impl DenseLayout {
    pub fn add<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        din: usize,
        dout: usize,
    ) -> Result<Self> {
        Ok(Self {
            w: store.insert(format!("{prefix}.w"), init_weight(rng, din, dout))?,
            b: store.insert(format!("{prefix}.b"), Matrix::zeros(1, dout))?,
        })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], p[self.b])
    }

    pub fn gather<T: Real>(&self, store: &ParamStore<T>) -> (Matrix<T>, Vec<T>) {
        (store.get(self.w).clone(), row_param(store.get(self.b)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormLayout {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormLayout {
    pub fn add<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{prefix}.gamma"), Matrix::filled(1, d, T::one()))?,
            beta: store.insert(format!("{prefix}.beta"), Matrix::zeros(1, d))?,
        })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], T::lit(ops::LAYER_NORM_EPS))
    }
}

/// Alternating dense layers and ReLU; no activation after the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayout {
    pub layers: Vec<DenseLayout>,
}

impl MlpLayout {
    /// `widths` lists input, hidden and output widths.
    pub fn add<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        widths: &[usize],
    ) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayout::add(store, rng, &format!("{prefix}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn gather<T: Real>(&self, store: &ParamStore<T>) -> Vec<(Matrix<T>, Vec<T>)> {
        self.layers.iter().map(|l| l.gather(store)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    pub q: DenseLayout,
    pub k: DenseLayout,
    pub v: DenseLayout,
    pub out: DenseLayout,
    pub heads: usize,
}

impl AttentionLayout {
    pub fn add<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        ops::check_heads(width, heads)?;
        Ok(Self {
            q: DenseLayout::add(store, rng, &format!("{prefix}.q"), width, width)?,
            k: DenseLayout::add(store, rng, &format!("{prefix}.k"), width, width)?,
            v: DenseLayout::add(store, rng, &format!("{prefix}.v"), width, width)?,
            out: DenseLayout::add(store, rng, &format!("{prefix}.o"), width, width)?,
            heads,
        })
    }

    pub fn gather<T: Real>(&self, store: &ParamStore<T>) -> AttentionParams<T> {
        let (wq, bq) = self.q.gather(store);
        let (wk, bk) = self.k.gather(store);
        let (wv, bv) = self.v.gather(store);
        let (wo, bo) = self.out.gather(store);
        AttentionParams {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            heads: self.heads,
        }
    }

    /// Same computation as [`ops::multi_head_attention`], recorded on the tape.
    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        queries_src: Var,
        keys_vals_src: Var,
    ) -> Result<Var> {
        let d = tape.shape(queries_src).1;
        ops::check_heads(d, self.heads)?;
        let dh = d / self.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let q = self.q.apply(tape, p, queries_src)?;
        let k = self.k.apply(tape, p, keys_vals_src)?;
        let v = self.v.apply(tape, p, keys_vals_src)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let logits = tape.matmul_t(qh, kh)?;
            let logits = tape.scale(logits, scale);
            let attn = tape.softmax_rows(logits);
            heads.push(tape.matmul(attn, vh)?);
        }
        let concat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.out.apply(tape, p, concat)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub norm_attn: NormLayout,
    pub attn: AttentionLayout,
    pub norm_mlp: NormLayout,
    pub mlp: MlpLayout,
}

impl BlockLayout {
    pub fn add<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        width: usize,
        heads: usize,
        mlp_hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: NormLayout::add(store, &format!("{prefix}.ln1"), width)?,
            attn: AttentionLayout::add(store, rng, &format!("{prefix}.attn"), width, heads)?,
            norm_mlp: NormLayout::add(store, &format!("{prefix}.ln2"), width)?,
            mlp: MlpLayout::add(store, rng, &format!("{prefix}.mlp"), &[width, mlp_hidden, width])?,
        })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let n = self.norm_attn.apply(tape, p, x)?;
        let a = self.attn.apply(tape, p, n, n)?;
        let x = tape.add(x, a)?;
        let n = self.norm_mlp.apply(tape, p, x)?;
        let m = self.mlp.apply(tape, p, n)?;
        tape.add(x, m)
    }
}
