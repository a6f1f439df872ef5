//! Verification (ROC, EER, TAR@FAR) and identification (CMC) metrics.
//!
//! Conventions: a pair is accepted when `score >= threshold`; EER is linearly
//! interpolated between the two ROC points bracketing the FAR = FRR crossing;
//! TAR@FAR is read off the step ROC without interpolation; CMC ranks count a
//! tie group at its worst position.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::msloss::SimilarityMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self> {
        if genuine.is_empty() || impostor.is_empty() {
            return Err(Error::Protocol(format!(
                "need genuine and impostor scores, got {} genuine and {} impostor",
                genuine.len(),
                impostor.len()
            )));
        }
        if genuine.iter().chain(&impostor).any(|s| !s.is_finite()) {
            return Err(Error::Protocol("non-finite score".into()));
        }
        Ok(Self { genuine, impostor })
    }
}

/// Unmasked same-identity scores are genuine, the rest impostor.
pub fn genuine_impostor_split(s: &SimilarityMatrix) -> Result<ScoreSet> {
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..s.rows() {
        for j in 0..s.cols() {
            if s.is_masked(i, j) {
                continue;
            }
            let v = s.scores[(i, j)];
            if s.is_genuine(i, j) {
                genuine.push(v);
            } else {
                impostor.push(v);
            }
        }
    }
    ScoreSet::new(genuine, impostor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    out.sort_by(f64::total_cmp);
    out
}

/// Fraction of `sorted_scores` that are `>= t`.
fn frac_at_least(sorted_scores: &[f64], t: f64) -> f64 {
    let below = sorted_scores.partition_point(|&s| s < t);
    (sorted_scores.len() - below) as f64 / sorted_scores.len() as f64
}

/// ROC evaluated at every distinct score, ascending by threshold, bracketed by
/// the sentinels `(−∞, 1, 1)` and `(+∞, 0, 0)`.
pub fn roc(scores: &ScoreSet) -> Vec<RocPoint> {
    let genuine = sorted(&scores.genuine);
    let impostor = sorted(&scores.impostor);
    let mut thresholds: Vec<f64> = genuine.iter().chain(&impostor).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut points = Vec::with_capacity(thresholds.len() + 2);
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        far: 1.0,
        tar: 1.0,
    });
    points.extend(thresholds.into_iter().map(|t| RocPoint {
        threshold: t,
        far: frac_at_least(&impostor, t),
        tar: frac_at_least(&genuine, t),
    }));
    points.push(RocPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        tar: 0.0,
    });
    points
}

/// Equal error rate from an ROC produced by [`roc`].
pub fn eer_from_roc(points: &[RocPoint]) -> f64 {
    let diff = |p: &RocPoint| p.far - (1.0 - p.tar);
    let k = points
        .iter()
        .position(|p| diff(p) <= 0.0)
        .expect("ROC ends at FAR = 0, FRR = 1");
    let dk = diff(&points[k]);
    if dk == 0.0 || k == 0 {
        return points[k].far;
    }
    let (a, b) = (&points[k - 1], &points[k]);
    let da = diff(a);
    let lambda = da / (da - dk);
    a.far + lambda * (b.far - a.far)
}

pub fn eer(scores: &ScoreSet) -> f64 {
    eer_from_roc(&roc(scores))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TarAtFar {
    pub far_target: f64,
    pub tar: f64,
    pub threshold: f64,
    pub far: f64,
    /// Fewer impostor scores than `1 / far_target`: the operating point is not resolvable.
    pub resolution_warning: bool,
}

pub fn tar_at_far_from_roc(points: &[RocPoint], impostor_count: usize, far_target: f64) -> Result<TarAtFar> {
    if !(far_target > 0.0 && far_target < 1.0) {
        return Err(Error::Config(format!("FAR target {far_target} outside (0, 1)")));
    }
    let p = points
        .iter()
        .find(|p| p.far <= far_target)
        .expect("ROC ends at FAR = 0");
    Ok(TarAtFar {
        far_target,
        tar: p.tar,
        threshold: p.threshold,
        far: p.far,
        resolution_warning: (impostor_count as f64) < 1.0 / far_target,
    })
}

/// TAR at the smallest threshold whose FAR does not exceed `far_target`.
pub fn tar_at_far(scores: &ScoreSet, far_target: f64) -> Result<TarAtFar> {
    tar_at_far_from_roc(&roc(scores), scores.impostor.len(), far_target)
}

/// Rank of each probe's best genuine gallery entry (1-based, pessimistic ties).
pub fn probe_ranks(s: &SimilarityMatrix) -> Result<Vec<usize>> {
    (0..s.rows())
        .into_par_iter()
        .map(|i| {
            let row = s.scores.row(i);
            let best = (0..s.cols())
                .filter(|&j| !s.is_masked(i, j) && s.is_genuine(i, j))
                .map(|j| row[j])
                .max_by(f64::total_cmp)
                .ok_or_else(|| Error::Protocol(format!("probe {i} has no genuine gallery entry")))?;
            Ok((0..s.cols()).filter(|&j| !s.is_masked(i, j) && row[j] >= best).count())
        })
        .collect()
}

/// `cmc[k]` = fraction of probes whose rank is at most `k + 1`.
pub fn cmc(s: &SimilarityMatrix, max_rank: usize) -> Result<Vec<f64>> {
    let ranks = probe_ranks(s)?;
    if ranks.is_empty() {
        return Err(Error::Protocol("no probes".into()));
    }
    let n = ranks.len() as f64;
    Ok((1..=max_rank)
        .map(|k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub eer: f64,
    pub tar_at_far: Vec<TarAtFar>,
    pub roc: Vec<RocPoint>,
    pub cmc: Vec<f64>,
    pub genuine_count: usize,
    pub impostor_count: usize,
}

impl ScoreReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    pub fn tar(&self, far_target: f64) -> Option<f64> {
        self.tar_at_far
            .iter()
            .find(|t| t.far_target == far_target)
            .map(|t| t.tar)
    }
}

/// Verification and identification metrics of one labeled score matrix.
pub fn score_report(s: &SimilarityMatrix, far_targets: &[f64], max_rank: usize) -> Result<ScoreReport> {
    let set = genuine_impostor_split(s)?;
    let points = roc(&set);
    let tar_at_far = far_targets
        .iter()
        .map(|&f| tar_at_far_from_roc(&points, set.impostor.len(), f))
        .collect::<Result<_>>()?;
    Ok(ScoreReport {
        eer: eer_from_roc(&points),
        tar_at_far,
        cmc: cmc(s, max_rank)?,
        roc: points,
        genuine_count: set.genuine.len(),
        impostor_count: set.impostor.len(),
    })
}
