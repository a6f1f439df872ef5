//! Random instance generators and brute-force oracles shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use ridgematch_core::data::Image;
use ridgematch_core::encoder::GlobalEmbedding;
use ridgematch_core::encoder::{Encoder, EncoderConfig};
use ridgematch_core::gradcheck::grad_check;
use ridgematch_core::layers::{AttentionLayout, MlpLayout};
use ridgematch_core::msloss::{
    composite_loss, composite_loss_on_tape, mining_boundary_gap, ms_loss_on_tape, LossConfig, SimilarityMatrix,
};
use ridgematch_core::params::{Bound, ParamStore};
use ridgematch_core::rng::keyed_rng;
use ridgematch_core::tape::{Tape, Var};
use ridgematch_core::trainer::stage1_objective_on_tape;
use ridgematch_core::{Matrix, Modality};

pub const STEP: f64 = 1e-4;

/// Output scale for composite objectives. Rounding noise in a finite
/// difference is about 1e-12·|f|, which would otherwise exceed the 1e-8
/// relative-error floor at entries whose true gradient is zero (key biases
/// under softmax, unmined pairs far from the boundary). Entries with
/// gradients above the floor are unaffected: relative error is scale-free.
pub const OBJECTIVE_SCALE: f64 = 1e-3;

pub fn rng(seed: u64, purpose: &str) -> ChaCha8Rng {
    keyed_rng(seed, purpose, &[])
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn weigh(tape: &mut Tape<'_, f64>, out: Var, w: &Matrix<f64>) -> ridgematch_core::Result<Var> {
    tape.weighted_sum(out, w.clone())
}

// ---------------------------------------------------------------- gradients

/// One random instance per call; each returns the max relative error.
pub fn grad_linear(rng: &mut ChaCha8Rng) -> f64 {
    let (n, din, dout) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
    let inputs = [
        normal_matrix(rng, n, din),
        normal_matrix(rng, din, dout),
        normal_matrix(rng, 1, dout),
    ];
    let w = normal_matrix(rng, n, dout);
    grad_check(&inputs, STEP, |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        weigh(t, y, &w)
    })
    .unwrap()
    .max_rel_err
}

/// Widths start at 3: with two features every row normalizes to about (±1, ∓1)
/// and the input gradient shrinks to the order of the epsilon.
pub fn grad_layer_norm(rng: &mut ChaCha8Rng) -> f64 {
    let (n, d) = (rng.random_range(1..4), rng.random_range(3..8));
    let inputs = [
        normal_matrix(rng, n, d),
        normal_matrix(rng, 1, d),
        normal_matrix(rng, 1, d),
    ];
    let w = normal_matrix(rng, n, d);
    grad_check(&inputs, STEP, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weigh(t, y, &w)
    })
    .unwrap()
    .max_rel_err
}

pub fn grad_softmax(rng: &mut ChaCha8Rng) -> f64 {
    let (n, d) = (rng.random_range(1..4), rng.random_range(2..7));
    let inputs = [normal_matrix(rng, n, d)];
    let w = normal_matrix(rng, n, d);
    grad_check(&inputs, STEP, |t, v| {
        let y = t.softmax_rows(v[0]);
        weigh(t, y, &w)
    })
    .unwrap()
    .max_rel_err
}

pub fn grad_normalize(rng: &mut ChaCha8Rng) -> f64 {
    let (n, d) = (rng.random_range(1..4), rng.random_range(2..7));
    let inputs = [normal_matrix(rng, n, d)];
    let w = normal_matrix(rng, n, d);
    grad_check(&inputs, STEP, |t, v| {
        let y = t.l2_normalize_rows(v[0])?;
        weigh(t, y, &w)
    })
    .unwrap()
    .max_rel_err
}

/// Two-layer ReLU MLP; instances with a ReLU input within 1e-3 of the kink are redrawn.
pub fn grad_mlp(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let (n, d, h, o) = (
            rng.random_range(1..4),
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(1..4),
        );
        let mut store = ParamStore::<f64>::new();
        let mlp = MlpLayout::add(&mut store, rng, "m", &[d, h, o]).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let (r, c) = store.get(id).shape();
            *store.get_mut(id) = normal_matrix(rng, r, c);
        }
        let mut inputs = vec![normal_matrix(rng, n, d)];
        inputs.extend(store.values().iter().cloned());
        let w = normal_matrix(rng, n, o);
        let f = |t: &mut Tape<'_, f64>, v: &[Var]| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = mlp.apply(t, &p, v[0])?;
            weigh(t, y, &w)
        };
        let mut probe = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| probe.leaf_ref(m)).collect();
        f(&mut probe, &vars).unwrap();
        if probe.relu_margin().unwrap_or(f64::INFINITY) < 1e-3 {
            continue;
        }
        return grad_check(&inputs, STEP, f).unwrap().max_rel_err;
    }
}

/// Multi-head cross-attention wrt both inputs and every projection.
pub fn grad_attention(rng: &mut ChaCha8Rng) -> f64 {
    let heads = rng.random_range(1..3);
    let d = heads * rng.random_range(1..4);
    let (n, m) = (rng.random_range(1..4), rng.random_range(1..5));
    let mut store = ParamStore::<f64>::new();
    let attn = AttentionLayout::add(&mut store, rng, "a", d, heads).unwrap();
    let mut inputs = vec![normal_matrix(rng, n, d), normal_matrix(rng, m, d)];
    inputs.extend(store.values().iter().cloned());
    let w = normal_matrix(rng, n, d);
    grad_check(&inputs, STEP, |t, v| {
        let p = Bound::from_vars(v[2..].to_vec());
        let y = attn.apply(t, &p, v[0], v[1])?;
        let f = weigh(t, y, &w)?;
        Ok(t.scale(f, OBJECTIVE_SCALE))
    })
    .unwrap()
    .max_rel_err
}

/// Multi-similarity loss wrt the score matrix; instances within 1e-3 of a
/// mining boundary are redrawn.
pub fn grad_ms_loss(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = LossConfig::stage1();
    loop {
        let (m, n) = (rng.random_range(1..6), rng.random_range(2..7));
        let ids = rng.random_range(1..4);
        let rows: Vec<usize> = (0..m).map(|_| rng.random_range(0..ids)).collect();
        let cols: Vec<usize> = (0..n).map(|_| rng.random_range(0..ids)).collect();
        let data = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = Matrix::from_vec(m, n, data).unwrap();
        let sim = SimilarityMatrix::unmasked(s.clone(), rows.clone(), cols.clone()).unwrap();
        if mining_boundary_gap(&sim, &cfg) < 1e-3 {
            continue;
        }
        return grad_check(&[s], STEP, |t, v| {
            let (l, _) = ms_loss_on_tape(t, v[0], &rows, &cols, false, &cfg)?;
            Ok(t.scale(l, OBJECTIVE_SCALE))
        })
        .unwrap()
        .max_rel_err;
    }
}

pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        image_size: 4,
        patch_size: 2,
        width: 4,
        layers: 1,
        heads: 2,
        mlp_hidden: 4,
        head_hidden: 4,
        embed_dim: 3,
    }
}

/// Full stage-1 forward plus composite loss wrt every encoder parameter, on two
/// identities with one CL and one CB image each. Instances within 5e-3 of a
/// ReLU kink or a mining boundary are redrawn.
pub fn grad_stage1(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = LossConfig::stage1();
    loop {
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::init(tiny_encoder_config(), &mut store, rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let (r, c) = store.get(id).shape();
            let scale = if store.name(id).ends_with(".gamma") { 0.0 } else { 0.5 };
            let noise = normal_matrix(rng, r, c);
            for (a, b) in store.get_mut(id).as_mut_slice().iter_mut().zip(noise.as_slice()) {
                *a += scale * b;
            }
        }
        let images: Vec<Image> = (0..4)
            .map(|_| Image::from_fn(4, 4, |_, _| rng.random_range(0.0f32..1.0)))
            .collect();
        let refs: Vec<&Image> = images.iter().collect();
        let labels = [0, 1, 0, 1];
        let mods = [Modality::Cl, Modality::Cl, Modality::Cb, Modality::Cb];
        let f = |t: &mut Tape<'_, f64>, v: &[Var]| {
            let p = Bound::from_vars(v.to_vec());
            let (l, _, _) = stage1_objective_on_tape(&enc, t, &p, &refs, &labels, &mods, &cfg)?;
            Ok(t.scale(l, OBJECTIVE_SCALE))
        };
        let inputs: Vec<Matrix<f64>> = store.values().to_vec();
        let mut probe = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| probe.leaf_ref(m)).collect();
        let p = Bound::from_vars(vars);
        let (_, _, gap) = stage1_objective_on_tape(&enc, &mut probe, &p, &refs, &labels, &mods, &cfg).unwrap();
        if gap < 5e-3 || probe.relu_margin().unwrap_or(f64::INFINITY) < 5e-3 {
            continue;
        }
        return grad_check(&inputs, STEP, f).unwrap().max_rel_err;
    }
}

// ---------------------------------------------------------------- loss oracle

/// Random labeled unit embeddings clustered by identity.
pub struct LossBatch {
    pub cl: Vec<Vec<f64>>,
    pub cl_labels: Vec<usize>,
    pub cb: Vec<Vec<f64>>,
    pub cb_labels: Vec<usize>,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// At most 16 samples over at most 5 identities, both modalities present.
pub fn loss_batch(rng: &mut ChaCha8Rng) -> LossBatch {
    let dim = rng.random_range(2..9);
    let ids = rng.random_range(1..=5);
    let centers: Vec<Vec<f64>> = (0..ids)
        .map(|_| unit((0..dim).map(|_| StandardNormal.sample(rng)).collect()))
        .collect();
    let spread = rng.random_range(0.05..1.5);
    let noise = Normal::new(0.0, spread).unwrap();
    let total = rng.random_range(2..=16);
    let n_cl = rng.random_range(1..total);
    let draw = |rng: &mut ChaCha8Rng| {
        let id = rng.random_range(0..ids);
        let v = centers[id].iter().map(|c| c + noise.sample(rng)).collect();
        (unit(v), id)
    };
    let (cl, cl_labels): (Vec<_>, Vec<_>) = (0..n_cl).map(|_| draw(rng)).unzip();
    let (cb, cb_labels): (Vec<_>, Vec<_>) = (n_cl..total).map(|_| draw(rng)).unzip();
    LossBatch {
        cl,
        cl_labels,
        cb,
        cb_labels,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct per-pair evaluation of one multi-similarity term: the loss and
/// dL/dS for every pair `(i, j)`.
pub fn oracle_term(
    a: &[Vec<f64>],
    la: &[usize],
    b: &[Vec<f64>],
    lb: &[usize],
    same: bool,
    cfg: &LossConfig,
) -> (f64, Vec<Vec<f64>>) {
    let m = a.len() as f64;
    let mut total = 0.0;
    let mut weights = vec![vec![0.0; b.len()]; a.len()];
    for i in 0..a.len() {
        let others: Vec<usize> = (0..b.len()).filter(|&j| !(same && i == j)).collect();
        let pos: Vec<usize> = others.iter().cloned().filter(|&j| la[i] == lb[j]).collect();
        let neg: Vec<usize> = others.iter().cloned().filter(|&j| la[i] != lb[j]).collect();
        let s = |j: usize| dot(&a[i], &b[j]);
        let hardest_pos = pos.iter().map(|&j| s(j)).fold(f64::INFINITY, f64::min);
        let hardest_neg = neg.iter().map(|&j| s(j)).fold(f64::NEG_INFINITY, f64::max);
        let mined_pos: Vec<usize> = pos
            .iter()
            .cloned()
            .filter(|&j| {
                if neg.is_empty() {
                    s(j) < cfg.tau
                } else {
                    s(j) < hardest_neg + cfg.margin
                }
            })
            .collect();
        let mined_neg: Vec<usize> = neg
            .iter()
            .cloned()
            .filter(|&j| {
                if pos.is_empty() {
                    s(j) > cfg.tau
                } else {
                    s(j) > hardest_pos - cfg.margin
                }
            })
            .collect();
        let ep = |j: usize| (-cfg.alpha_pos * (s(j) - cfg.tau)).exp();
        let en = |j: usize| (cfg.alpha_neg * (s(j) - cfg.tau)).exp();
        let p: f64 = mined_pos.iter().map(|&j| ep(j)).sum();
        let n: f64 = mined_neg.iter().map(|&j| en(j)).sum();
        total += (1.0 + p).ln() / cfg.alpha_pos + (1.0 + n).ln() / cfg.alpha_neg;
        for &j in &mined_pos {
            weights[i][j] = -ep(j) / (1.0 + p) / m;
        }
        for &j in &mined_neg {
            weights[i][j] = en(j) / (1.0 + n) / m;
        }
    }
    (total / m, weights)
}

/// Oracle composite loss with its gradient wrt every CL and CB embedding.
pub struct OracleComposite {
    pub loss: f64,
    pub grad_cl: Vec<Vec<f64>>,
    pub grad_cb: Vec<Vec<f64>>,
}

pub fn oracle_composite(batch: &LossBatch, cfg: &LossConfig) -> OracleComposite {
    let bt = batch;
    let dim = bt.cl[0].len();
    let mut out = OracleComposite {
        loss: 0.0,
        grad_cl: vec![vec![0.0; dim]; bt.cl.len()],
        grad_cb: vec![vec![0.0; dim]; bt.cb.len()],
    };
    // (row side, col side): 0 = CL, 1 = CB
    for (ra, cb_side) in [(0usize, 0usize), (0, 1), (1, 1)] {
        let (a, la) = if ra == 0 {
            (&bt.cl, &bt.cl_labels)
        } else {
            (&bt.cb, &bt.cb_labels)
        };
        let (b, lb) = if cb_side == 0 {
            (&bt.cl, &bt.cl_labels)
        } else {
            (&bt.cb, &bt.cb_labels)
        };
        let (loss, w) = oracle_term(a, la, b, lb, ra == cb_side, cfg);
        out.loss += loss;
        for i in 0..a.len() {
            for j in 0..b.len() {
                for k in 0..dim {
                    let gi = w[i][j] * b[j][k];
                    let gj = w[i][j] * a[i][k];
                    if ra == 0 {
                        out.grad_cl[i][k] += gi
                    } else {
                        out.grad_cb[i][k] += gi
                    }
                    if cb_side == 0 {
                        out.grad_cl[j][k] += gj
                    } else {
                        out.grad_cb[j][k] += gj
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------- metric oracles

/// Log-uniform count in `[1, max]`.
fn stack(rows: &[Vec<f64>]) -> Matrix<f64> {
    Matrix::from_vec(rows.len(), rows[0].len(), rows.concat()).unwrap()
}

fn max_diff(a: &Matrix<f64>, b: &[Vec<f64>]) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.concat())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest loss or gradient discrepancy against the brute-force oracle.
pub fn loss_discrepancy(batch: &LossBatch, cfg: &LossConfig) -> f64 {
    let oracle = oracle_composite(batch, cfg);
    let emb = |v: &[Vec<f64>]| v.iter().map(|x| GlobalEmbedding::new(x).unwrap()).collect::<Vec<_>>();
    let terms = composite_loss(
        &emb(&batch.cl),
        &batch.cl_labels,
        &emb(&batch.cb),
        &batch.cb_labels,
        cfg,
    )
    .unwrap();

    let (cl, cb) = (stack(&batch.cl), stack(&batch.cb));
    let mut tape = Tape::new();
    let (a, b) = (tape.leaf_ref(&cl), tape.leaf_ref(&cb));
    let (total, on_tape, _) =
        composite_loss_on_tape(&mut tape, Some(a), &batch.cl_labels, Some(b), &batch.cb_labels, cfg).unwrap();
    let grads = tape.backward(total).unwrap();
    [
        (terms.total() - oracle.loss).abs(),
        (on_tape.total() - oracle.loss).abs(),
        (tape.scalar(total) - oracle.loss).abs(),
        max_diff(&grads.get_or_zeros(a, cl.shape()), &oracle.grad_cl),
        max_diff(&grads.get_or_zeros(b, cb.shape()), &oracle.grad_cb),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub fn log_uniform(rng: &mut ChaCha8Rng, max: usize) -> usize {
    let x: f64 = rng.random_range(0.0..(max as f64).ln());
    (x.exp().floor() as usize).clamp(1, max)
}

/// Scores on a coarse grid (many ties) or continuous, genuine shifted up.
pub fn score_lists(rng: &mut ChaCha8Rng, max_genuine: usize, max_impostor: usize) -> (Vec<f64>, Vec<f64>) {
    let g = log_uniform(rng, max_genuine);
    let i = log_uniform(rng, max_impostor);
    let shift = rng.random_range(0.0..2.0);
    let grid: Option<f64> = if rng.random_bool(0.5) {
        Some([0.5, 0.1, 0.01][rng.random_range(0..3)])
    } else {
        None
    };
    let draw = |rng: &mut ChaCha8Rng, mu: f64| {
        let z: f64 = StandardNormal.sample(rng);
        let v = mu + z * 0.5;
        match grid {
            Some(q) => (v / q).round() * q,
            None => v,
        }
    };
    let genuine = (0..g).map(|_| draw(rng, shift)).collect();
    let impostor = (0..i).map(|_| draw(rng, 0.0)).collect();
    (genuine, impostor)
}

/// `(threshold, FAR, TAR)` by counting at every candidate threshold.
pub fn oracle_roc(genuine: &[f64], impostor: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut ts: Vec<f64> = genuine.iter().chain(impostor).cloned().collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    let frac = |v: &[f64], t: f64| v.iter().filter(|&&s| s >= t).count() as f64 / v.len() as f64;
    let mut out = vec![(f64::NEG_INFINITY, 1.0, 1.0)];
    out.extend(ts.into_iter().map(|t| (t, frac(impostor, t), frac(genuine, t))));
    out.push((f64::INFINITY, 0.0, 0.0));
    out
}

/// First sweep point with FAR ≤ FRR; FAR interpolated between it and its predecessor.
pub fn oracle_eer(roc: &[(f64, f64, f64)]) -> f64 {
    for k in 0..roc.len() {
        let (_, far, tar) = roc[k];
        let frr = 1.0 - tar;
        if far <= frr {
            if far == frr || k == 0 {
                return far;
            }
            let (_, far0, tar0) = roc[k - 1];
            let (d0, d1) = (far0 - (1.0 - tar0), far - frr);
            return far0 + d0 / (d0 - d1) * (far - far0);
        }
    }
    unreachable!("sweep ends at FAR 0, FRR 1")
}

pub fn oracle_tar_at_far(roc: &[(f64, f64, f64)], target: f64) -> f64 {
    roc.iter()
        .filter(|p| p.1 <= target)
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .unwrap()
        .2
}

/// Random labeled matrix where every probe has at least one genuine entry.
pub fn cmc_instance(rng: &mut ChaCha8Rng) -> SimilarityMatrix {
    let (m, n) = (rng.random_range(1..20), rng.random_range(2..40));
    let ids = rng.random_range(2..8);
    let col_labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..ids)).collect();
    let row_labels: Vec<usize> = (0..m).map(|_| col_labels[rng.random_range(0..n)]).collect();
    let coarse = rng.random_bool(0.5);
    let data = (0..m * n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if coarse {
                (v * 5.0).round() / 5.0
            } else {
                v
            }
        })
        .collect();
    SimilarityMatrix::unmasked(Matrix::from_vec(m, n, data).unwrap(), row_labels, col_labels).unwrap()
}

/// Rank by full descending sort; a tie group counts at its last position.
pub fn oracle_cmc(s: &SimilarityMatrix, max_rank: usize) -> Vec<f64> {
    let ranks: Vec<usize> = (0..s.rows())
        .map(|i| {
            let mut row: Vec<(f64, bool)> = (0..s.cols())
                .filter(|&j| !s.is_masked(i, j))
                .map(|j| (s.scores[(i, j)], s.is_genuine(i, j)))
                .collect();
            row.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let best = row.iter().find(|e| e.1).unwrap().0;
            row.iter().rposition(|e| e.0 == best).unwrap() + 1
        })
        .collect();
    (1..=max_rank)
        .map(|k| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
        .collect()
}

/// Compares every metric on one random score set and one random CMC instance
/// against the oracles; returns a description of the first mismatch.
pub fn metrics_mismatch(rng: &mut ChaCha8Rng, max_genuine: usize, max_impostor: usize) -> Option<String> {
    use ridgematch_core::metrics::{cmc, eer_from_roc, roc, tar_at_far_from_roc, ScoreSet};
    let (g, i) = score_lists(rng, max_genuine, max_impostor);
    let expected = oracle_roc(&g, &i);
    let set = ScoreSet::new(g, i).unwrap();
    let points = roc(&set);
    let got: Vec<(f64, f64, f64)> = points.iter().map(|p| (p.threshold, p.far, p.tar)).collect();
    if got != expected {
        return Some(format!(
            "roc differs on {} genuine / {} impostor",
            set.genuine.len(),
            set.impostor.len()
        ));
    }
    let (e, o) = (eer_from_roc(&points), oracle_eer(&expected));
    if (e - o).abs() > 1e-9 {
        return Some(format!("eer {e} vs oracle {o}"));
    }
    let random_target = rng.random_range(1e-4..1.0);
    for target in [0.1, 0.01, 0.001, random_target] {
        let t = tar_at_far_from_roc(&points, set.impostor.len(), target).unwrap();
        let o = oracle_tar_at_far(&expected, target);
        if t.tar != o || t.far > target {
            return Some(format!("TAR@FAR={target}: {} vs oracle {o}", t.tar));
        }
    }
    let s = cmc_instance(rng);
    let max_rank = rng.random_range(1..=s.cols());
    let (c, o) = (cmc(&s, max_rank).unwrap(), oracle_cmc(&s, max_rank));
    if c != o {
        return Some(format!("cmc {c:?} vs oracle {o:?}"));
    }
    None
}

// ---------------------------------------------------------------- invariants

pub type Check = fn(u64) -> Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn permute_rows(m: &Matrix<f64>, perm: &[usize]) -> Matrix<f64> {
    let data = perm.iter().flat_map(|&r| m.row(r).to_vec()).collect();
    Matrix::from_vec(m.rows(), m.cols(), data).unwrap()
}

pub fn inv_softmax(seed: u64) -> Result<(), String> {
    use ridgematch_core::ops::softmax_rows;
    let mut rng = rng(seed, "inv-softmax");
    let (n, d) = (rng.random_range(1..6), rng.random_range(1..9));
    let x = normal_matrix(&mut rng, n, d).map(|v| v * 10.0);
    let y = softmax_rows(&x);
    let c: f64 = rng.random_range(-50.0..50.0);
    let shifted = softmax_rows(&x.map(|v| v + c));
    for r in 0..n {
        let s: f64 = y.row(r).iter().sum();
        ensure((s - 1.0).abs() <= 1e-6, || format!("row {r} sums to {s}"))?;
    }
    let diff = y.max_abs_diff(&shifted);
    ensure(y.is_finite() && diff <= 1e-12, || {
        format!("shift changed softmax by {diff:e}")
    })
}

pub fn inv_attention_permutation(seed: u64) -> Result<(), String> {
    use ridgematch_core::ops::multi_head_attention;
    let mut rng = rng(seed, "inv-attention");
    let heads = rng.random_range(1..4);
    let d = heads * rng.random_range(1..5);
    let mut store = ParamStore::<f64>::new();
    let params = AttentionLayout::add(&mut store, &mut rng, "a", d, heads)
        .unwrap()
        .gather(&store);
    let (n, m) = (rng.random_range(1..6), rng.random_range(1..8));
    let q = normal_matrix(&mut rng, n, d);
    let kv = normal_matrix(&mut rng, m, d);
    let perm = permutation(&mut rng, m);
    let a = multi_head_attention(&q, &kv, &params).unwrap();
    let b = multi_head_attention(&q, &permute_rows(&kv, &perm), &params).unwrap();
    let diff = a.max_abs_diff(&b);
    ensure(a.is_finite() && diff <= 1e-12, || {
        format!("key/value permutation moved output by {diff:e}")
    })
}

pub fn inv_gap_and_normalize(seed: u64) -> Result<(), String> {
    use ridgematch_core::ops::{gap, l2_normalize};
    let mut rng = rng(seed, "inv-gap");
    let (n, d) = (rng.random_range(1..10), rng.random_range(1..9));
    let x = normal_matrix(&mut rng, n, d);
    let perm = permutation(&mut rng, n);
    let (a, b) = (gap(&x).unwrap(), gap(&permute_rows(&x, &perm)).unwrap());
    let diff = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    ensure(diff <= 1e-12, || format!("row permutation moved gap by {diff:e}"))?;
    let u = l2_normalize(x.row(0)).unwrap();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    ensure((norm - 1.0).abs() <= 1e-6, || format!("normalized norm {norm}"))?;
    let s: f64 = rng.random_range(1e-3..1e3);
    let scaled: Vec<f64> = x.row(0).iter().map(|v| v * s).collect();
    let w = l2_normalize(&scaled).unwrap();
    let diff = u.iter().zip(&w).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    ensure(diff <= 1e-12, || format!("scaling by {s} moved direction by {diff:e}"))
}

pub fn small_encoder_config() -> EncoderConfig {
    EncoderConfig {
        image_size: 16,
        patch_size: 4,
        width: 16,
        layers: 1,
        heads: 2,
        mlp_hidden: 32,
        head_hidden: 16,
        embed_dim: 8,
    }
}

pub fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Image {
    Image::from_fn(side, side, |_, _| rng.random_range(0.0f32..1.0))
}

/// 32-bit embeddings are unit-norm, repeatable and carry `T` tokens.
pub fn inv_encoder_unit_norm(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed, "inv-encoder");
    let cfg = small_encoder_config();
    let mut store = ParamStore::<f32>::new();
    let enc = Encoder::init(cfg, &mut store, &mut rng).unwrap();
    let image = random_image(&mut rng, cfg.image_size);
    let (tokens, emb) = enc.encode(&store, &image).unwrap();
    let norm = emb.values().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    ensure((norm - 1.0).abs() <= 1e-6, || format!("embedding norm {norm}"))?;
    ensure(tokens.matrix().shape() == (cfg.tokens(), cfg.width), || {
        "token shape".into()
    })?;
    let again = enc.encode(&store, &image).unwrap();
    ensure(again.1 == emb && again.0 == tokens, || {
        "encode is not repeatable".into()
    })
}

/// With no transformer blocks, moving patches and positional rows together
/// leaves the pooled embedding unchanged.
pub fn inv_patch_permutation(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed, "inv-patches");
    let cfg = EncoderConfig {
        layers: 0,
        ..small_encoder_config()
    };
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::init(cfg, &mut store, &mut rng).unwrap();
    let image = random_image(&mut rng, cfg.image_size);
    let (g, p) = (cfg.grid(), cfg.patch_size);
    let perm = permutation(&mut rng, g * g);
    let moved = Image::from_fn(cfg.image_size, cfg.image_size, |r, c| {
        let src = perm[(r / p) * g + c / p];
        image.get((src / g) * p + r % p, (src % g) * p + c % p)
    });
    let (_, a) = enc.encode(&store, &image).unwrap();
    let pos = permute_rows(store.get(enc.pos), &perm);
    *store.get_mut(enc.pos) = pos;
    let (_, b) = enc.encode(&store, &moved).unwrap();
    let diff = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max);
    ensure(diff <= 1e-12, || {
        format!("patch permutation moved the embedding by {diff:e}")
    })
}

fn random_fusion<T: ridgematch_core::Real>(
    rng: &mut ChaCha8Rng,
    width: usize,
) -> (ridgematch_core::Fusion, ParamStore<T>) {
    use ridgematch_core::{Fusion, FusionConfig};
    let cfg = FusionConfig {
        blocks: rng.random_range(1..3),
        heads: 2,
        mlp_hidden: 2 * width,
    };
    let mut store = ParamStore::<T>::new();
    let f = Fusion::init(cfg, width, &mut store, rng).unwrap();
    (f, store)
}

fn token_set<T: ridgematch_core::Real>(rng: &mut ChaCha8Rng, n: usize, d: usize) -> ridgematch_core::TokenSet<T> {
    ridgematch_core::TokenSet(normal_matrix(rng, n, d).cast())
}

pub fn inv_match_score(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed, "inv-match");
    let d = 2 * rng.random_range(1..5);
    let (fusion, store) = random_fusion::<f32>(&mut rng, d);
    let (n, m) = (rng.random_range(1..8), rng.random_range(1..8));
    let a = token_set(&mut rng, n, d);
    let b = token_set(&mut rng, m, d);
    let ab = fusion.match_score(&store, &a, &b).unwrap().0;
    let ba = fusion.match_score(&store, &b, &a).unwrap().0;
    ensure(ab == ba, || format!("match_score not symmetric: {ab} vs {ba}"))?;
    ensure(ab.abs() <= 1.0, || format!("match_score {ab} outside [-1, 1]"))?;
    let self_score = fusion.match_score(&store, &a, &a).unwrap().0;
    ensure(self_score.abs() <= 1.0, || format!("self score {self_score}"))
}

pub fn inv_cross_attend(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed, "inv-cross");
    let d = 2 * rng.random_range(1..5);
    let (fusion, store) = random_fusion::<f64>(&mut rng, d);
    let (n, m) = (rng.random_range(1..7), rng.random_range(1..7));
    let v = token_set(&mut rng, n, d);
    let q = token_set(&mut rng, m, d);
    let (v1, q1) = fusion.cross_attend(&store, &v, &q).unwrap();
    ensure(v1.0.shape() == (n, d) && q1.0.shape() == (m, d), || {
        "shape changed".into()
    })?;
    let perm = permutation(&mut rng, m);
    let q_perm = ridgematch_core::TokenSet(permute_rows(&q.0, &perm));
    let (v2, q2) = fusion.cross_attend(&store, &v, &q_perm).unwrap();
    let dv = v1.0.max_abs_diff(&v2.0);
    let dq = permute_rows(&q1.0, &perm).max_abs_diff(&q2.0);
    ensure(dv <= 1e-10 && dq <= 1e-10, || {
        format!("permuting Q moved V by {dv:e}, Q by {dq:e}")
    })
}

fn random_sim(rng: &mut ChaCha8Rng) -> SimilarityMatrix {
    let (m, n) = (rng.random_range(1..8), rng.random_range(1..8));
    let ids = rng.random_range(1..4);
    let rows = (0..m).map(|_| rng.random_range(0..ids)).collect();
    let cols = (0..n).map(|_| rng.random_range(0..ids)).collect();
    let data = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    SimilarityMatrix::unmasked(Matrix::from_vec(m, n, data).unwrap(), rows, cols).unwrap()
}

pub fn inv_ms_loss(seed: u64) -> Result<(), String> {
    use ridgematch_core::msloss::ms_loss;
    let mut rng = rng(seed, "inv-msloss");
    let cfg = LossConfig::stage1();
    let s = random_sim(&mut rng);
    let out = ms_loss(&s, &cfg);
    ensure(out.loss >= 0.0, || format!("negative loss {}", out.loss))?;
    if out.masks.kept() == 0 {
        ensure(out.loss == 0.0, || "loss without mined pairs".into())?;
    }
    for k in 0..s.scores.len() {
        let mined = out.masks.pos[k] || out.masks.neg[k];
        ensure(mined || out.grad.as_slice()[k] == 0.0, || {
            format!("gradient at unmined entry {k}")
        })?;
    }
    // raise one kept entry without crossing any mining boundary
    let gap = mining_boundary_gap(&s, &cfg);
    if let Some(k) = (0..s.scores.len()).find(|&k| out.masks.pos[k] || out.masks.neg[k]) {
        let mut raised = s.clone();
        raised.scores.as_mut_slice()[k] += (gap / 4.0).min(1e-3);
        let after = ms_loss(&raised, &cfg);
        if after.masks == out.masks {
            let ok = if out.masks.neg[k] {
                after.loss >= out.loss
            } else {
                after.loss <= out.loss
            };
            ensure(ok, || format!("loss moved the wrong way at entry {k}"))?;
        }
    }
    Ok(())
}

pub fn inv_composite_permutation(seed: u64) -> Result<(), String> {
    use ridgematch_core::encoder::GlobalEmbedding;
    use ridgematch_core::msloss::composite_loss;
    let mut rng = rng(seed, "inv-composite");
    let b = loss_batch(&mut rng);
    let cfg = LossConfig::stage1();
    let emb = |v: &[Vec<f64>]| v.iter().map(|x| GlobalEmbedding::new(x).unwrap()).collect::<Vec<_>>();
    let base = composite_loss(&emb(&b.cl), &b.cl_labels, &emb(&b.cb), &b.cb_labels, &cfg).unwrap();
    let (pa, pb) = (permutation(&mut rng, b.cl.len()), permutation(&mut rng, b.cb.len()));
    let pick = |v: &[Vec<f64>], p: &[usize]| p.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    let pick_l = |v: &[usize], p: &[usize]| p.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let moved = composite_loss(
        &emb(&pick(&b.cl, &pa)),
        &pick_l(&b.cl_labels, &pa),
        &emb(&pick(&b.cb, &pb)),
        &pick_l(&b.cb_labels, &pb),
        &cfg,
    )
    .unwrap();
    let diff = (base.total() - moved.total()).abs();
    ensure(diff <= 1e-12, || {
        format!("sample permutation moved the loss by {diff:e}")
    })
}

pub fn inv_similarity_bounds(seed: u64) -> Result<(), String> {
    use ridgematch_core::encoder::GlobalEmbedding;
    use ridgematch_core::msloss::{self_similarity_matrix, similarity_matrix};
    let mut rng = rng(seed, "inv-bounds");
    let d = rng.random_range(1..65);
    let n = rng.random_range(1..10);
    let embs: Vec<GlobalEmbedding<f32>> = (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            GlobalEmbedding::new(&v).unwrap()
        })
        .collect();
    let labels = vec![0; n];
    for s in [
        similarity_matrix(&embs, &labels, &embs, &labels).unwrap(),
        self_similarity_matrix(&embs, &labels).unwrap(),
    ] {
        ensure(s.scores.as_slice().iter().all(|v| v.abs() <= 1.0), || {
            "score outside [-1, 1]".into()
        })?;
    }
    Ok(())
}

pub fn inv_cmc(seed: u64) -> Result<(), String> {
    use ridgematch_core::metrics::cmc;
    let mut rng = rng(seed, "inv-cmc");
    let s = cmc_instance(&mut rng);
    let c = cmc(&s, s.cols()).unwrap();
    ensure(c.windows(2).all(|w| w[0] <= w[1]), || format!("cmc decreases: {c:?}"))?;
    ensure(*c.last().unwrap() == 1.0, || {
        format!("cmc at gallery size is {}", c.last().unwrap())
    })
}

pub fn inv_eer_improvement(seed: u64) -> Result<(), String> {
    use ridgematch_core::metrics::{eer, ScoreSet};
    let mut rng = rng(seed, "inv-eer");
    let (g, i) = score_lists(&mut rng, 50, 200);
    let before = eer(&ScoreSet::new(g.clone(), i.clone()).unwrap());
    ensure((0.0..=1.0).contains(&before), || format!("eer {before}"))?;
    let lift: f64 = rng.random_range(0.0..1.0);
    let improved: Vec<f64> = g
        .iter()
        .map(|&v| if rng.random_bool(0.5) { v + lift } else { v })
        .collect();
    let after = eer(&ScoreSet::new(improved, i).unwrap());
    ensure(after <= before + 1e-12, || {
        format!("raising genuine scores moved EER {before} -> {after}")
    })
}

/// Strictly increasing transforms on grid scores (distinct values stay distinct).
pub fn inv_metric_transform(seed: u64) -> Result<(), String> {
    use ridgematch_core::metrics::score_report;
    let mut rng = rng(seed, "inv-transform");
    let s = cmc_instance(&mut rng);
    let has_impostor = (0..s.rows()).any(|i| (0..s.cols()).any(|j| !s.is_genuine(i, j)));
    if !has_impostor {
        return Ok(());
    }
    let transforms: [fn(f64) -> f64; 3] = [|x| 3.0 * x + 1.0, |x| (2.0 * x).exp(), |x| x.powi(3)];
    let targets = [0.5, 0.1, 0.01];
    let base = score_report(&s, &targets, s.cols()).unwrap();
    for (k, f) in transforms.iter().enumerate() {
        let mut t = s.clone();
        t.scores = s.scores.map(f);
        let r = score_report(&t, &targets, s.cols()).unwrap();
        let far_tar = |rep: &ridgematch_core::ScoreReport| rep.roc.iter().map(|p| (p.far, p.tar)).collect::<Vec<_>>();
        ensure(r.eer == base.eer, || {
            format!("transform {k}: eer {} vs {}", r.eer, base.eer)
        })?;
        ensure(r.cmc == base.cmc, || format!("transform {k}: cmc changed"))?;
        ensure(far_tar(&r) == far_tar(&base), || format!("transform {k}: roc changed"))?;
        for (a, b) in r.tar_at_far.iter().zip(&base.tar_at_far) {
            ensure(a.tar == b.tar && a.far == b.far, || {
                format!("transform {k}: TAR@FAR changed")
            })?;
        }
    }
    Ok(())
}

pub fn inv_lr_and_decay(seed: u64) -> Result<(), String> {
    use ridgematch_core::optim::{lr_schedule, AdamWConfig, OptimizerState};
    use ridgematch_core::params::GradRecord;
    let mut rng = rng(seed, "inv-optim");
    let epochs = rng.random_range(1..100);
    let mut milestones: Vec<usize> = (0..rng.random_range(0..4))
        .map(|_| rng.random_range(1..epochs + 1))
        .collect();
    milestones.sort();
    milestones.dedup();
    let decay = rng.random_range(0.01..=1.0);
    let lrs: Vec<f64> = (0..epochs).map(|e| lr_schedule(e, 1e-3, &milestones, decay)).collect();
    ensure(lrs.windows(2).all(|w| w[1] <= w[0]), || {
        format!("lr increases: {lrs:?}")
    })?;

    let mut store = ParamStore::<f64>::new();
    store.insert("w", normal_matrix(&mut rng, 3, 4)).unwrap();
    let before = store.values()[0].sq_norm();
    let cfg = AdamWConfig {
        weight_decay: rng.random_range(1e-4..1e-1),
        ..AdamWConfig::default()
    };
    let mut state = OptimizerState::new(&store, cfg);
    let id = store.ids().next().unwrap();
    let grads = GradRecord {
        entries: vec![(id, Matrix::zeros(3, 4))],
    };
    state.step(&mut store, &grads, rng.random_range(1e-4..1e-1)).unwrap();
    let after = store.values()[0].sq_norm();
    ensure(after < before && state.step == 1, || {
        format!("norm² {before} -> {after}")
    })
}

pub const INVARIANTS: &[(&str, Check)] = &[
    ("softmax rows sum to 1 and ignore shifts", inv_softmax),
    ("attention ignores key/value order", inv_attention_permutation),
    (
        "gap ignores row order; normalize is unit and scale-free",
        inv_gap_and_normalize,
    ),
    ("encoder embeddings are unit-norm and repeatable", inv_encoder_unit_norm),
    (
        "patch and position permutation leaves pooling unchanged",
        inv_patch_permutation,
    ),
    ("match_score symmetric and bounded", inv_match_score),
    (
        "cross_attend keeps shapes and ignores opposite-stream order",
        inv_cross_attend,
    ),
    ("ms_loss nonnegative, sparse gradient, monotone", inv_ms_loss),
    ("composite loss ignores sample order", inv_composite_permutation),
    ("similarity scores within [-1, 1]", inv_similarity_bounds),
    ("cmc nondecreasing and complete", inv_cmc),
    (
        "eer bounded and monotone under genuine improvement",
        inv_eer_improvement,
    ),
    ("metrics invariant under increasing transforms", inv_metric_transform),
    ("lr nonincreasing; decay shrinks weights", inv_lr_and_decay),
];
