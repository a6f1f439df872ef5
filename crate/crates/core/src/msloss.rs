//! Multi-similarity loss with hard-pair mining, and the three-matrix composite
//! objective over contactless (CL) and contact-based (CB) embeddings.
//!
//! Mining works on raw similarities, per anchor row `i`:
//! * a negative `j` is kept iff `S[i,j] > min(S[i, positives]) − margin`;
//! * a positive `j` is kept iff `S[i,j] < max(S[i, negatives]) + margin`;
//! * a row without positives keeps negatives with `S[i,j] > τ`, a row without
//!   negatives keeps positives with `S[i,j] < τ`.
//!
//! The loss is averaged over anchor rows.

use crate::encoder::GlobalEmbedding;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{dot, Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha_pos: f64,
    pub alpha_neg: f64,
    pub tau: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl LossConfig {
    /// Scales 2 / 40, threshold 0.5, margin 0.7.
    pub fn stage1() -> Self {
        Self {
            alpha_pos: 2.0,
            alpha_neg: 40.0,
            tau: 0.5,
            margin: 0.7,
        }
    }

    /// Stage-2 setting: margin and threshold both 0.5.
    pub fn stage2() -> Self {
        Self {
            margin: 0.5,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_pos > 0.0 && self.alpha_neg > 0.0) {
            return Err(Error::Config("loss scales must be positive".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config("mining margin must be non-negative".into()));
        }
        if !(self.tau > -1.0 && self.tau < 1.0) {
            return Err(Error::Config("similarity threshold must lie in (-1, 1)".into()));
        }
        Ok(())
    }
}

/// Labeled score matrix. `self_mask[i·n + j]` marks entries where row and column
/// are the same physical sample; those never take part in mining or metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub scores: Matrix<f64>,
    pub row_labels: Vec<usize>,
    pub col_labels: Vec<usize>,
    pub self_mask: Vec<bool>,
}

impl SimilarityMatrix {
    pub fn new(
        scores: Matrix<f64>,
        row_labels: Vec<usize>,
        col_labels: Vec<usize>,
        self_mask: Vec<bool>,
    ) -> Result<Self> {
        let (m, n) = scores.shape();
        if row_labels.len() != m || col_labels.len() != n {
            return Err(Error::dim(
                "similarity labels",
                (m, n),
                (row_labels.len(), col_labels.len()),
            ));
        }
        if self_mask.len() != m * n {
            return Err(Error::dim("similarity mask", (m, n), (self_mask.len(), 1)));
        }
        Ok(Self {
            scores,
            row_labels,
            col_labels,
            self_mask,
        })
    }

    /// Unmasked matrix.
    pub fn unmasked(scores: Matrix<f64>, row_labels: Vec<usize>, col_labels: Vec<usize>) -> Result<Self> {
        let len = scores.len();
        Self::new(scores, row_labels, col_labels, vec![false; len])
    }

    /// Square matrix of a list against itself with the diagonal masked.
    pub fn within(scores: Matrix<f64>, labels: Vec<usize>) -> Result<Self> {
        let n = scores.rows();
        let mask = (0..n * scores.cols()).map(|k| k / n.max(1) == k % n.max(1)).collect();
        Self::new(scores, labels.clone(), labels, mask)
    }

    pub fn rows(&self) -> usize {
        self.scores.rows()
    }

    pub fn cols(&self) -> usize {
        self.scores.cols()
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.self_mask[i * self.cols() + j]
    }

    pub fn is_genuine(&self, i: usize, j: usize) -> bool {
        self.row_labels[i] == self.col_labels[j]
    }
}

fn check_embeddings<T: Real>(a: &[GlobalEmbedding<T>], b: &[GlobalEmbedding<T>]) -> Result<usize> {
    let first = a.first().or(b.first()).ok_or(Error::EmptyInput("similarity_matrix"))?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("similarity_matrix"));
    }
    let d = first.dim();
    for e in a.iter().chain(b) {
        if e.dim() != d {
            return Err(Error::dim("similarity_matrix", (1, d), (1, e.dim())));
        }
    }
    Ok(d)
}

fn dot_matrix<T: Real>(a: &[GlobalEmbedding<T>], b: &[GlobalEmbedding<T>]) -> Matrix<f64> {
    let mut m = Matrix::zeros(a.len(), b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            // rounding can carry a dot of unit vectors just past ±1
            m[(i, j)] = dot(x.values(), y.values()).as_f64().clamp(-1.0, 1.0);
        }
    }
    m
}

/// `scores[i,j] = ⟨a_i, b_j⟩` between two different lists (no self pairs).
pub fn similarity_matrix<T: Real>(
    a: &[GlobalEmbedding<T>],
    a_labels: &[usize],
    b: &[GlobalEmbedding<T>],
    b_labels: &[usize],
) -> Result<SimilarityMatrix> {
    check_embeddings(a, b)?;
    SimilarityMatrix::unmasked(dot_matrix(a, b), a_labels.to_vec(), b_labels.to_vec())
}

/// Similarities of a list against itself, diagonal masked.
pub fn self_similarity_matrix<T: Real>(a: &[GlobalEmbedding<T>], labels: &[usize]) -> Result<SimilarityMatrix> {
    check_embeddings(a, a)?;
    SimilarityMatrix::within(dot_matrix(a, a), labels.to_vec())
}

/// Kept pairs, row-major over the similarity matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairMasks {
    pub pos: Vec<bool>,
    pub neg: Vec<bool>,
}

impl PairMasks {
    pub fn kept(&self) -> usize {
        self.pos.iter().chain(&self.neg).filter(|&&k| k).count()
    }
}

/// Per-row mining thresholds: `(positive threshold, negative threshold)`. A
/// positive is kept below the first, a negative above the second.
fn row_thresholds(s: &SimilarityMatrix, i: usize, cfg: &LossConfig) -> (f64, f64) {
    let mut min_pos = f64::INFINITY;
    let mut max_neg = f64::NEG_INFINITY;
    for j in 0..s.cols() {
        if s.is_masked(i, j) {
            continue;
        }
        let v = s.scores[(i, j)];
        if s.is_genuine(i, j) {
            min_pos = min_pos.min(v);
        } else {
            max_neg = max_neg.max(v);
        }
    }
    let has_pos = min_pos.is_finite();
    let has_neg = max_neg.is_finite();
    let pos_thr = if has_neg { max_neg + cfg.margin } else { cfg.tau };
    let neg_thr = if has_pos { min_pos - cfg.margin } else { cfg.tau };
    (pos_thr, neg_thr)
}

pub fn mine_pairs(s: &SimilarityMatrix, cfg: &LossConfig) -> PairMasks {
    let (m, n) = s.scores.shape();
    let mut masks = PairMasks {
        pos: vec![false; m * n],
        neg: vec![false; m * n],
    };
    for i in 0..m {
        let (pos_thr, neg_thr) = row_thresholds(s, i, cfg);
        for j in 0..n {
            if s.is_masked(i, j) {
                continue;
            }
            let v = s.scores[(i, j)];
            if s.is_genuine(i, j) {
                masks.pos[i * n + j] = v < pos_thr;
            } else {
                masks.neg[i * n + j] = v > neg_thr;
            }
        }
    }
    masks
}

/// Smallest distance between any candidate score and its row's mining
/// threshold. The loss is differentiable wherever this is positive.
pub fn mining_boundary_gap(s: &SimilarityMatrix, cfg: &LossConfig) -> f64 {
    let mut gap = f64::INFINITY;
    for i in 0..s.rows() {
        let (pos_thr, neg_thr) = row_thresholds(s, i, cfg);
        for j in 0..s.cols() {
            if s.is_masked(i, j) {
                continue;
            }
            let thr = if s.is_genuine(i, j) { pos_thr } else { neg_thr };
            gap = gap.min((s.scores[(i, j)] - thr).abs());
        }
    }
    gap
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsLoss {
    pub loss: f64,
    /// dLoss/dS, nonzero only at mined entries.
    pub grad: Matrix<f64>,
    pub masks: PairMasks,
}

/// Multi-similarity loss of one similarity matrix, with its gradient.
pub fn ms_loss(s: &SimilarityMatrix, cfg: &LossConfig) -> MsLoss {
    let masks = mine_pairs(s, cfg);
    let (m, n) = s.scores.shape();
    let mut grad = Matrix::zeros(m, n);
    if m == 0 {
        return MsLoss { loss: 0.0, grad, masks };
    }
    let inv_m = 1.0 / m as f64;
    let mut total = 0.0;
    for i in 0..m {
        let mut pos_sum = 0.0;
        let mut neg_sum = 0.0;
        for j in 0..n {
            let k = i * n + j;
            let v = s.scores[(i, j)];
            if masks.pos[k] {
                let e = (-cfg.alpha_pos * (v - cfg.tau)).exp();
                pos_sum += e;
                grad[(i, j)] = e;
            } else if masks.neg[k] {
                let e = (cfg.alpha_neg * (v - cfg.tau)).exp();
                neg_sum += e;
                grad[(i, j)] = e;
            }
        }
        total += pos_sum.ln_1p() / cfg.alpha_pos + neg_sum.ln_1p() / cfg.alpha_neg;
        for j in 0..n {
            let k = i * n + j;
            if masks.pos[k] {
                grad[(i, j)] = -grad[(i, j)] / (1.0 + pos_sum) * inv_m;
            } else if masks.neg[k] {
                grad[(i, j)] = grad[(i, j)] / (1.0 + neg_sum) * inv_m;
            }
        }
    }
    MsLoss {
        loss: total * inv_m,
        grad,
        masks,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CompositeTerms {
    pub cl2cl: f64,
    pub cl2cb: f64,
    pub cb2cb: f64,
}

impl CompositeTerms {
    pub fn total(&self) -> f64 {
        self.cl2cl + self.cl2cb + self.cb2cb
    }
}

/// `L_cl2cl + L_cl2cb + L_cb2cb`. Terms involving an empty list are zero.
pub fn composite_loss<T: Real>(
    cl: &[GlobalEmbedding<T>],
    cl_labels: &[usize],
    cb: &[GlobalEmbedding<T>],
    cb_labels: &[usize],
    cfg: &LossConfig,
) -> Result<CompositeTerms> {
    if cl.len() != cl_labels.len() || cb.len() != cb_labels.len() {
        return Err(Error::dim(
            "composite_loss labels",
            (cl.len(), cb.len()),
            (cl_labels.len(), cb_labels.len()),
        ));
    }
    let mut terms = CompositeTerms::default();
    if !cl.is_empty() {
        terms.cl2cl = ms_loss(&self_similarity_matrix(cl, cl_labels)?, cfg).loss;
    }
    if !cl.is_empty() && !cb.is_empty() {
        terms.cl2cb = ms_loss(&similarity_matrix(cl, cl_labels, cb, cb_labels)?, cfg).loss;
    }
    if !cb.is_empty() {
        terms.cb2cb = ms_loss(&self_similarity_matrix(cb, cb_labels)?, cfg).loss;
    }
    Ok(terms)
}

fn loss_node<T: Real>(
    tape: &mut Tape<'_, T>,
    sim: Var,
    s: &SimilarityMatrix,
    cfg: &LossConfig,
) -> Result<(Var, MsLoss)> {
    let out = ms_loss(s, cfg);
    let node = tape.external_loss(sim, T::lit(out.loss), out.grad.cast())?;
    Ok((node, out))
}

/// Records an already-built similarity matrix var and its multi-similarity
/// loss on the tape.
pub fn ms_loss_on_tape<T: Real>(
    tape: &mut Tape<'_, T>,
    sim: Var,
    row_labels: &[usize],
    col_labels: &[usize],
    self_pairs: bool,
    cfg: &LossConfig,
) -> Result<(Var, MsLoss)> {
    let scores = tape.value(sim).cast::<f64>();
    let s = if self_pairs {
        SimilarityMatrix::within(scores, row_labels.to_vec())?
    } else {
        SimilarityMatrix::unmasked(scores, row_labels.to_vec(), col_labels.to_vec())?
    };
    loss_node(tape, sim, &s, cfg)
}

fn tape_term<T: Real>(
    tape: &mut Tape<'_, T>,
    (a, la): (Var, &[usize]),
    (b, lb): (Var, &[usize]),
    same: bool,
    cfg: &LossConfig,
) -> Result<(Var, f64, f64)> {
    let sim = tape.matmul_t(a, b)?;
    let (node, out) = ms_loss_on_tape(tape, sim, la, lb, same, cfg)?;
    let scores = tape.value(sim).cast::<f64>();
    let s = if same {
        SimilarityMatrix::within(scores, la.to_vec())?
    } else {
        SimilarityMatrix::unmasked(scores, la.to_vec(), lb.to_vec())?
    };
    Ok((node, out.loss, mining_boundary_gap(&s, cfg)))
}

/// Composite loss over stacked unit-norm embedding rows (`cl`: n×e, `cb`: m×e).
/// Returns the scalar loss var, the term values and the smallest mining
/// boundary gap across the three matrices.
pub fn composite_loss_on_tape<T: Real>(
    tape: &mut Tape<'_, T>,
    cl: Option<Var>,
    cl_labels: &[usize],
    cb: Option<Var>,
    cb_labels: &[usize],
    cfg: &LossConfig,
) -> Result<(Var, CompositeTerms, f64)> {
    let mut nodes = Vec::new();
    let mut terms = CompositeTerms::default();
    let mut gap = f64::INFINITY;
    if let Some(a) = cl {
        let (node, loss, g) = tape_term(tape, (a, cl_labels), (a, cl_labels), true, cfg)?;
        terms.cl2cl = loss;
        gap = gap.min(g);
        nodes.push(node);
    }
    if let (Some(a), Some(b)) = (cl, cb) {
        let (node, loss, g) = tape_term(tape, (a, cl_labels), (b, cb_labels), false, cfg)?;
        terms.cl2cb = loss;
        gap = gap.min(g);
        nodes.push(node);
    }
    if let Some(b) = cb {
        let (node, loss, g) = tape_term(tape, (b, cb_labels), (b, cb_labels), true, cfg)?;
        terms.cb2cb = loss;
        gap = gap.min(g);
        nodes.push(node);
    }
    let total = match nodes.split_first() {
        None => tape.leaf(Matrix::zeros(1, 1)),
        Some((&first, rest)) => {
            let mut acc = first;
            for &n in rest {
                acc = tape.add(acc, n)?;
            }
            acc
        }
    };
    Ok((total, terms, gap))
}
