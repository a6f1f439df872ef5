//! Stage 2: two-way cross-attention between the token sets of a candidate pair,
//! followed by pooling and a cosine score.
//!
//! Each block computes both directions from its input: the V stream queries the
//! Q stream and the Q stream queries the V stream. Each stream then gets its own
//! residual MLP.

use rand::Rng;
use rayon::prelude::*;

use crate::encoder::{GlobalEmbedding, TokenSet};
use crate::error::{Error, Result};
use crate::layers::{AttentionLayout, MlpLayout, NormLayout};
use crate::ops;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            blocks: 1,
            heads: 4,
            mlp_hidden: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossBlockLayout {
    pub norm_v: NormLayout,
    pub norm_q: NormLayout,
    /// V-stream queries over Q-stream keys/values.
    pub attn_v: AttentionLayout,
    /// Q-stream queries over V-stream keys/values.
    pub attn_q: AttentionLayout,
    pub norm_mlp_v: NormLayout,
    pub norm_mlp_q: NormLayout,
    pub mlp_v: MlpLayout,
    pub mlp_q: MlpLayout,
}

impl CrossBlockLayout {
    fn add<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        width: usize,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        let mlp = [width, cfg.mlp_hidden, width];
        Ok(Self {
            norm_v: NormLayout::add(store, &format!("{prefix}.v.ln1"), width)?,
            norm_q: NormLayout::add(store, &format!("{prefix}.q.ln1"), width)?,
            attn_v: AttentionLayout::add(store, rng, &format!("{prefix}.v.attn"), width, cfg.heads)?,
            attn_q: AttentionLayout::add(store, rng, &format!("{prefix}.q.attn"), width, cfg.heads)?,
            norm_mlp_v: NormLayout::add(store, &format!("{prefix}.v.ln2"), width)?,
            norm_mlp_q: NormLayout::add(store, &format!("{prefix}.q.ln2"), width)?,
            mlp_v: MlpLayout::add(store, rng, &format!("{prefix}.v.mlp"), &mlp)?,
            mlp_q: MlpLayout::add(store, rng, &format!("{prefix}.q.mlp"), &mlp)?,
        })
    }

    fn apply<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, fv: Var, fq: Var) -> Result<(Var, Var)> {
        let nv = self.norm_v.apply(tape, p, fv)?;
        let nq = self.norm_q.apply(tape, p, fq)?;
        let msg_v = self.attn_v.apply(tape, p, nv, nq)?;
        let msg_q = self.attn_q.apply(tape, p, nq, nv)?;
        let v = tape.add(fv, msg_v)?;
        let q = tape.add(fq, msg_q)?;
        let hv = self.norm_mlp_v.apply(tape, p, v)?;
        let hv = self.mlp_v.apply(tape, p, hv)?;
        let hq = self.norm_mlp_q.apply(tape, p, q)?;
        let hq = self.mlp_q.apply(tape, p, hq)?;
        Ok((tape.add(v, hv)?, tape.add(q, hq)?))
    }

    /// `(v-stream id, q-stream id)` pairs of corresponding parameters.
    fn stream_pairs(&self) -> Vec<(ParamId, ParamId)> {
        let mut pairs = vec![
            (self.norm_v.gamma, self.norm_q.gamma),
            (self.norm_v.beta, self.norm_q.beta),
            (self.norm_mlp_v.gamma, self.norm_mlp_q.gamma),
            (self.norm_mlp_v.beta, self.norm_mlp_q.beta),
        ];
        for (a, b) in [
            (&self.attn_v.q, &self.attn_q.q),
            (&self.attn_v.k, &self.attn_q.k),
            (&self.attn_v.v, &self.attn_q.v),
            (&self.attn_v.out, &self.attn_q.out),
        ] {
            pairs.push((a.w, b.w));
            pairs.push((a.b, b.b));
        }
        for (a, b) in self.mlp_v.layers.iter().zip(&self.mlp_q.layers) {
            pairs.push((a.w, b.w));
            pairs.push((a.b, b.b));
        }
        pairs
    }
}

/// Similarity of a candidate pair after cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PairScore(pub f64);

/// Parameter layout of the cross-attention matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub config: FusionConfig,
    pub width: usize,
    pub blocks: Vec<CrossBlockLayout>,
}

impl Fusion {
    /// Adds freshly initialized fusion parameters (prefix `fus.`) to `store`.
    pub fn init<T: Real, R: Rng>(
        config: FusionConfig,
        width: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        ops::check_heads(width, config.heads)?;
        let blocks = (0..config.blocks)
            .map(|i| CrossBlockLayout::add(store, rng, &format!("fus.block{i}"), width, &config))
            .collect::<Result<_>>()?;
        Ok(Self { config, width, blocks })
    }

    pub fn param_ids<T: Real>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store.ids().filter(|&id| store.name(id).starts_with("fus.")).collect()
    }

    /// Copies every V-stream parameter onto its Q-stream counterpart, making the
    /// module symmetric under swapping the two inputs.
    pub fn make_symmetric<T: Real>(&self, store: &mut ParamStore<T>) {
        for block in &self.blocks {
            for (v, q) in block.stream_pairs() {
                *store.get_mut(q) = store.get(v).clone();
            }
        }
    }

    fn check_widths<T: Real>(&self, tape: &Tape<'_, T>, fv: Var, fq: Var) -> Result<()> {
        if tape.shape(fv).1 != self.width || tape.shape(fq).1 != self.width {
            return Err(Error::dim("cross_attend", tape.shape(fv), tape.shape(fq)));
        }
        Ok(())
    }

    pub fn cross_attend_on_tape<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        fv: Var,
        fq: Var,
    ) -> Result<(Var, Var)> {
        self.check_widths(tape, fv, fq)?;
        let (mut v, mut q) = (fv, fq);
        for block in &self.blocks {
            (v, q) = block.apply(tape, p, v, q)?;
        }
        Ok((v, q))
    }

    /// Cosine of the pooled attended streams with `fv` in the V role (1×1 var).
    pub fn directed_score_on_tape<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, fv: Var, fq: Var) -> Result<Var> {
        let (v, q) = self.cross_attend_on_tape(tape, p, fv, fq)?;
        let v = tape.mean_rows(v)?;
        let v = tape.l2_normalize_rows(v)?;
        let q = tape.mean_rows(q)?;
        let q = tape.l2_normalize_rows(q)?;
        tape.matmul_t(v, q)
    }

    /// Score averaged over both input orders (1×1 var).
    pub fn match_score_on_tape<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, a: Var, b: Var) -> Result<Var> {
        let ab = self.directed_score_on_tape(tape, p, a, b)?;
        let ba = self.directed_score_on_tape(tape, p, b, a)?;
        let sum = tape.add(ab, ba)?;
        Ok(tape.scale(sum, T::lit(0.5)))
    }

    pub fn cross_attend<T: Real>(
        &self,
        store: &ParamStore<T>,
        fv: &TokenSet<T>,
        fq: &TokenSet<T>,
    ) -> Result<(TokenSet<T>, TokenSet<T>)> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (v, q) = (tape.leaf_ref(&fv.0), tape.leaf_ref(&fq.0));
        let (v, q) = self.cross_attend_on_tape(&mut tape, &p, v, q)?;
        Ok((TokenSet(tape.value(v).clone()), TokenSet(tape.value(q).clone())))
    }

    /// Symmetrized fine-grained score of a pair of token sets.
    pub fn match_score<T: Real>(&self, store: &ParamStore<T>, a: &TokenSet<T>, b: &TokenSet<T>) -> Result<PairScore> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (va, vb) = (tape.leaf_ref(&a.0), tape.leaf_ref(&b.0));
        let s = self.match_score_on_tape(&mut tape, &p, va, vb)?;
        Ok(PairScore(tape.scalar(s).as_f64().clamp(-1.0, 1.0)))
    }

    /// All probe × gallery scores, computed in parallel. Identical to scoring
    /// every pair sequentially.
    pub fn score_matrix<T: Real>(
        &self,
        store: &ParamStore<T>,
        probes: &[&TokenSet<T>],
        gallery: &[&TokenSet<T>],
    ) -> Result<Matrix<f64>> {
        let n = gallery.len();
        let scores: Vec<f64> = (0..probes.len() * n)
            .into_par_iter()
            .map(|k| self.match_score(store, probes[k / n], gallery[k % n]).map(|s| s.0))
            .collect::<Result<_>>()?;
        Matrix::from_vec(probes.len(), n, scores)
    }
}

/// `l2_normalize(gap(·))` of both attended token sets.
pub fn refined_embeddings<T: Real>(
    fv: &TokenSet<T>,
    fq: &TokenSet<T>,
) -> Result<(GlobalEmbedding<T>, GlobalEmbedding<T>)> {
    Ok((
        GlobalEmbedding::new(&ops::gap(&fv.0)?)?,
        GlobalEmbedding::new(&ops::gap(&fq.0)?)?,
    ))
}

/// `w · fine + (1 − w) · global`.
pub fn fused_score(global_sim: f64, fine_sim: f64, w: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("fusion weight {w} outside [0, 1]")));
    }
    Ok(w * fine_sim + (1.0 - w) * global_sim)
}
