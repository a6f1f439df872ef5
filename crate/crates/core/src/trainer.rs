//! Two-stage training and evaluation.
//!
//! Per-batch gradients are computed per sample: every image (or candidate pair)
//! gets its own tape, the loss gradient with respect to the embeddings (or pair
//! scores) is computed once, and each tape is back-propagated with its slice of
//! that gradient. Parameter gradients are summed in sample order, so results do
//! not depend on thread scheduling.

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data::{make_batch, BatchConfig, Dataset, Image, Modality, Split};
use crate::encoder::{Encoder, EncoderConfig, GlobalEmbedding, TokenSet};
use crate::error::{Error, Result};
use crate::fusion::{fused_score, Fusion, FusionConfig};
use crate::metrics::{score_report, ScoreReport};
use crate::msloss::{composite_loss_on_tape, ms_loss, similarity_matrix, CompositeTerms, LossConfig, SimilarityMatrix};
use crate::optim::{clip_grad_norm, lr_schedule, AdamWConfig, OptimizerState};
use crate::params::{Bound, GradRecord, ParamId, ParamStore};
use crate::rng::{derive_key, keyed_rng};
use crate::tape::{Tape, Var};
use crate::tensor::{Matrix, Real};

/// Encoder (and optionally fusion) layout with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub fusion: Option<Fusion>,
    pub store: ParamStore<f32>,
}

impl Model {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Encoder::init(config, &mut store, &mut keyed_rng(seed, "init-encoder", &[]))?;
        Ok(Self {
            encoder,
            fusion: None,
            store,
        })
    }

    pub fn attach_fusion(&mut self, config: FusionConfig, seed: u64) -> Result<()> {
        if self.fusion.is_some() {
            return Err(Error::Config("model already has a fusion module".into()));
        }
        let width = self.encoder.config.width;
        self.fusion = Some(Fusion::init(
            config,
            width,
            &mut self.store,
            &mut keyed_rng(seed, "init-fusion", &[]),
        )?);
        Ok(())
    }

    /// Rebuilds the layout described by the checkpoint and adopts its values.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Self::init(ck.encoder, 0)?;
        if let Some(f) = ck.fusion {
            model.attach_fusion(f, 0)?;
        }
        if model.store.len() != ck.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                ck.params.len()
            )));
        }
        for ((name, want), (got_name, got)) in model.store.iter().zip(ck.params.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {got_name} {:?} does not match expected {name} {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        model.store = ck.params.clone();
        Ok(model)
    }

    pub fn to_checkpoint(&self, stage: u8, loss: LossConfig, seed: u64, epochs: usize, trace: Vec<f64>) -> Checkpoint {
        Checkpoint {
            stage,
            encoder: self.encoder.config,
            fusion: self.fusion.as_ref().map(|f| f.config),
            loss,
            seed,
            epochs,
            loss_trace: trace,
            params: self.store.clone(),
        }
    }

    pub fn encode_all(&self, images: &[&Image]) -> Result<Vec<(TokenSet<f32>, GlobalEmbedding<f32>)>> {
        self.encoder.encode_all(&self.store, images)
    }

    pub fn fusion(&self) -> Result<&Fusion> {
        self.fusion
            .as_ref()
            .ok_or_else(|| Error::Config("model has no fusion module (stage-1 checkpoint)".into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub base_lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch: BatchConfig,
    pub adamw: AdamWConfig,
    pub clip_norm: f64,
    pub seed: u64,
    /// Stage 2 only: also update the encoder.
    pub train_encoder: bool,
}

/// Milestones at 60% and 85% of the run.
pub fn default_milestones(epochs: usize) -> Vec<usize> {
    let mut m: Vec<usize> = [0.6, 0.85]
        .iter()
        .map(|f| (f * epochs as f64).round() as usize)
        .filter(|&e| e > 0)
        .collect();
    m.dedup();
    m
}

impl TrainConfig {
    fn base(stage: u8, epochs: usize) -> Self {
        Self {
            stage,
            encoder: EncoderConfig::desk(),
            fusion: FusionConfig::default(),
            loss: if stage == 1 {
                LossConfig::stage1()
            } else {
                LossConfig::stage2()
            },
            base_lr: 1e-5,
            lr_milestones: default_milestones(epochs),
            lr_decay: 0.3,
            epochs,
            batch: BatchConfig::default(),
            adamw: AdamWConfig::default(),
            clip_norm: 5.0,
            seed: 0,
            train_encoder: false,
        }
    }

    /// Full-scale stage 1: lr 1e-5, 50 epochs, decay 0.3, 10 identities × 3 samples × 2 modalities.
    pub fn full_stage1() -> Self {
        Self {
            batch: BatchConfig {
                ids_per_batch: 10,
                samples_per_id: 3,
            },
            ..Self::base(1, 50)
        }
    }

    /// Fine-tuning phase: lr 5e-6, decay 0.6.
    pub fn full_finetune() -> Self {
        Self {
            base_lr: 5e-6,
            lr_decay: 0.6,
            ..Self::full_stage1()
        }
    }

    /// Full-scale stage 2: lr 1e-5, batches of 30 (5 identities × 3 samples × 2 modalities).
    pub fn full_stage2() -> Self {
        Self {
            batch: BatchConfig {
                ids_per_batch: 5,
                samples_per_id: 3,
            },
            ..Self::base(2, 50)
        }
    }

    /// Desk-scale stage 1 on the 32×32 synthetic corpus.
    pub fn desk_stage1() -> Self {
        Self {
            base_lr: 1e-3,
            ..Self::base(1, 200)
        }
    }

    /// Desk-scale stage 2.
    pub fn desk_stage2() -> Self {
        Self {
            base_lr: 1e-3,
            ..Self::base(2, 30)
        }
    }

    /// Sets the epoch count and moves the milestones to 60% / 85% of it.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self.lr_milestones = default_milestones(epochs);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("lr milestones must be strictly increasing".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr decay {} outside (0, 1]", self.lr_decay)));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("invalid base lr {}", self.base_lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        self.loss.validate()?;
        self.encoder.validate()
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.base_lr, &self.lr_milestones, self.lr_decay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Loss and summed parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchGrads<T> {
    pub loss: f64,
    pub terms: CompositeTerms,
    pub grads: GradRecord<T>,
}

fn split_by_modality(modalities: &[Modality]) -> (Vec<usize>, Vec<usize>) {
    let cl = (0..modalities.len())
        .filter(|&i| modalities[i] == Modality::Cl)
        .collect();
    let cb = (0..modalities.len())
        .filter(|&i| modalities[i] == Modality::Cb)
        .collect();
    (cl, cb)
}

fn gather<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

fn sum_records<T: Real>(records: Vec<GradRecord<T>>, store: &ParamStore<T>, select: &[ParamId]) -> GradRecord<T> {
    let mut total = GradRecord {
        entries: select
            .iter()
            .map(|&id| {
                let (r, c) = store.get(id).shape();
                (id, Matrix::zeros(r, c))
            })
            .collect(),
    };
    for r in &records {
        total.accumulate(r);
    }
    total
}

/// Stage-1 objective recorded on a single tape: every image is encoded and the
/// composite loss is taken over the CL and CB embedding rows.
pub fn stage1_objective_on_tape<T: Real>(
    encoder: &Encoder,
    tape: &mut Tape<'_, T>,
    p: &Bound,
    images: &[&Image],
    labels: &[usize],
    modalities: &[Modality],
    cfg: &LossConfig,
) -> Result<(Var, CompositeTerms, f64)> {
    let embeddings = images
        .iter()
        .map(|img| encoder.forward(tape, p, img).map(|o| o.embedding))
        .collect::<Result<Vec<_>>>()?;
    let (cl, cb) = split_by_modality(modalities);
    let stack = |tape: &mut Tape<'_, T>, idx: &[usize]| -> Result<Option<Var>> {
        if idx.is_empty() {
            return Ok(None);
        }
        tape.concat_rows(&gather(&embeddings, idx)).map(Some)
    };
    let cl_var = stack(tape, &cl)?;
    let cb_var = stack(tape, &cb)?;
    composite_loss_on_tape(tape, cl_var, &gather(labels, &cl), cb_var, &gather(labels, &cb), cfg)
}

/// Stage-1 loss and encoder gradients of one batch.
pub fn stage1_batch_grads<T: Real>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    images: &[&Image],
    labels: &[usize],
    modalities: &[Modality],
    cfg: &LossConfig,
) -> Result<BatchGrads<T>> {
    let select = encoder.param_ids(store);
    let forward: Vec<(Tape<'_, T>, Bound, Var)> = images
        .par_iter()
        .map(|img| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let out = encoder.forward(&mut tape, &p, img)?;
            Ok((tape, p, out.embedding))
        })
        .collect::<Result<_>>()?;

    let (cl, cb) = split_by_modality(modalities);
    let mut head = Tape::new();
    let rows = |idx: &[usize]| -> Result<Option<Matrix<T>>> {
        if idx.is_empty() {
            return Ok(None);
        }
        let d = forward[idx[0]].0.shape(forward[idx[0]].2).1;
        let data = idx
            .iter()
            .flat_map(|&i| forward[i].0.value(forward[i].2).as_slice().to_vec())
            .collect();
        Matrix::from_vec(idx.len(), d, data).map(Some)
    };
    let cl_var = rows(&cl)?.map(|m| head.leaf(m));
    let cb_var = rows(&cb)?.map(|m| head.leaf(m));
    let (total, terms, _) = composite_loss_on_tape(
        &mut head,
        cl_var,
        &gather(labels, &cl),
        cb_var,
        &gather(labels, &cb),
        cfg,
    )?;
    let loss = head.scalar(total).as_f64();
    let seeds = head.backward(total)?;

    let mut row_grad: Vec<Option<Matrix<T>>> = vec![None; images.len()];
    for (var, idx) in [(cl_var, &cl), (cb_var, &cb)] {
        let Some(var) = var else { continue };
        let g = seeds.get_or_zeros(var, head.shape(var));
        for (r, &i) in idx.iter().enumerate() {
            row_grad[i] = Some(Matrix::row_vector(g.row(r)));
        }
    }
    let records = forward
        .par_iter()
        .zip(row_grad)
        .map(|((tape, p, emb), seed)| {
            let seed = seed.expect("every image is CL or CB");
            let grads = tape.backward_seeded(*emb, seed)?;
            Ok(store.collect_grads(&grads, p, &select))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchGrads {
        loss,
        terms,
        grads: sum_records(records, store, &select),
    })
}

/// Stage-2 loss (multi-similarity over the CL×CB match-score matrix) and
/// gradients of one batch. Encoder gradients are included when `train_encoder`.
#[allow(clippy::too_many_arguments)]
pub fn stage2_batch_grads<T: Real>(
    encoder: &Encoder,
    fusion: &Fusion,
    store: &ParamStore<T>,
    images: &[&Image],
    labels: &[usize],
    modalities: &[Modality],
    cfg: &LossConfig,
    train_encoder: bool,
) -> Result<BatchGrads<T>> {
    let (cl, cb) = split_by_modality(modalities);
    if cl.is_empty() || cb.is_empty() {
        return Err(Error::Protocol("stage-2 batch needs both modalities".into()));
    }
    let mut select = fusion.param_ids(store);
    if train_encoder {
        select.extend(encoder.param_ids(store));
        select.sort();
    }
    let image_tapes: Vec<(Tape<'_, T>, Bound, Var)> = images
        .par_iter()
        .map(|img| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let out = encoder.forward(&mut tape, &p, img)?;
            Ok((tape, p, out.tokens))
        })
        .collect::<Result<_>>()?;
    let tokens: Vec<&Matrix<T>> = image_tapes.iter().map(|(t, _, v)| t.value(*v)).collect();

    let pairs: Vec<(usize, usize)> = cl.iter().flat_map(|&i| cb.iter().map(move |&j| (i, j))).collect();
    let pair_tapes: Vec<(Tape<'_, T>, Bound, Var, Var, Var)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let a = tape.leaf_ref(tokens[i]);
            let b = tape.leaf_ref(tokens[j]);
            let s = fusion.match_score_on_tape(&mut tape, &p, a, b)?;
            Ok((tape, p, a, b, s))
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = pair_tapes.iter().map(|(t, _, _, _, s)| t.scalar(*s).as_f64()).collect();
    let sim = SimilarityMatrix::unmasked(
        Matrix::from_vec(cl.len(), cb.len(), scores)?,
        gather(labels, &cl),
        gather(labels, &cb),
    )?;
    let out = ms_loss(&sim, cfg);

    let pair_grads = pair_tapes
        .par_iter()
        .enumerate()
        .map(|(k, (tape, p, a, b, s))| {
            let g = out.grad.as_slice()[k];
            let grads = tape.backward_seeded(*s, Matrix::filled(1, 1, T::lit(g)))?;
            let rec = store.collect_grads(&grads, p, &select);
            let tok = if train_encoder {
                Some((
                    grads.get_or_zeros(*a, tape.shape(*a)),
                    grads.get_or_zeros(*b, tape.shape(*b)),
                ))
            } else {
                None
            };
            Ok((rec, tok))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(pair_grads.len() + images.len());
    let mut token_grads: Vec<Option<Matrix<T>>> = vec![None; images.len()];
    for (&(i, j), (rec, tok)) in pairs.iter().zip(pair_grads) {
        records.push(rec);
        if let Some((ga, gb)) = tok {
            for (idx, g) in [(i, ga), (j, gb)] {
                match &mut token_grads[idx] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
    }
    if train_encoder {
        let enc_records = image_tapes
            .par_iter()
            .zip(token_grads)
            .map(|((tape, p, tokens), g)| {
                let g = g.unwrap_or_else(|| {
                    let (r, c) = tape.shape(*tokens);
                    Matrix::zeros(r, c)
                });
                let grads = tape.backward_seeded(*tokens, g)?;
                Ok(store.collect_grads(&grads, p, &select))
            })
            .collect::<Result<Vec<_>>>()?;
        records.extend(enc_records);
    }
    Ok(BatchGrads {
        loss: out.loss,
        terms: CompositeTerms {
            cl2cb: out.loss,
            ..CompositeTerms::default()
        },
        grads: sum_records(records, store, &select),
    })
}

fn train_split(data: &Dataset) -> Result<Dataset> {
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("dataset has no train samples".into()));
    }
    Ok(train)
}

fn run_epochs(
    model: &mut Model,
    cfg: &TrainConfig,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<f64>> {
    let labels = data.labels();
    let mut opt = OptimizerState::new(&model.store, cfg.adamw);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        let batches = make_batch(&data.samples, cfg.batch, derive_key(cfg.seed, "epoch", &[epoch as u64]))?;
        let mut sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let images: Vec<&Image> = batch.indices.iter().map(|&i| &data.images[i]).collect();
            let batch_labels: Vec<usize> = batch.indices.iter().map(|&i| labels[i]).collect();
            let mut out = match (cfg.stage, &model.fusion) {
                (2, Some(fusion)) => stage2_batch_grads(
                    &model.encoder,
                    fusion,
                    &model.store,
                    &images,
                    &batch_labels,
                    &batch.modalities,
                    &cfg.loss,
                    cfg.train_encoder,
                )?,
                _ => stage1_batch_grads(
                    &model.encoder,
                    &model.store,
                    &images,
                    &batch_labels,
                    &batch.modalities,
                    &cfg.loss,
                )?,
            };
            if !out.loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            clip_grad_norm(&mut out.grads, cfg.clip_norm);
            opt.step(&mut model.store, &out.grads, lr)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
            sum += out.loss;
        }
        let loss = sum / batches.len().max(1) as f64;
        trace.push(loss);
        on_epoch(&EpochLog { epoch, loss, lr });
    }
    Ok(trace)
}

/// Trains a fresh encoder on the train split.
pub fn train_stage1(cfg: &TrainConfig, data: &Dataset, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<Checkpoint> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::Config(format!(
            "stage-1 training called with stage {}",
            cfg.stage
        )));
    }
    let train = train_split(data)?;
    let mut model = Model::init(cfg.encoder, cfg.seed)?;
    let trace = run_epochs(&mut model, cfg, &train, on_epoch)?;
    Ok(model.to_checkpoint(1, cfg.loss, cfg.seed, cfg.epochs, trace))
}

/// Continues stage-1 training from an encoder-only checkpoint, as when
/// fine-tuning on a new corpus. The encoder configuration comes from `init`.
pub fn resume_stage1(
    cfg: &TrainConfig,
    data: &Dataset,
    init: &Checkpoint,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    let cfg = TrainConfig {
        encoder: init.encoder,
        ..cfg.clone()
    };
    cfg.validate()?;
    if cfg.stage != 1 || init.fusion.is_some() {
        return Err(Error::Config(
            "stage-1 training resumes only from a stage-1 checkpoint".into(),
        ));
    }
    let train = train_split(data)?;
    let mut model = Model::from_checkpoint(init)?;
    let trace = run_epochs(&mut model, &cfg, &train, on_epoch)?;
    Ok(model.to_checkpoint(1, cfg.loss, cfg.seed, cfg.epochs, trace))
}

/// Trains the fusion module on top of a stage-1 (or stage-2) checkpoint. The
/// encoder configuration always comes from the checkpoint.
pub fn train_stage2(
    cfg: &TrainConfig,
    data: &Dataset,
    init: &Checkpoint,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    let cfg = TrainConfig {
        encoder: init.encoder,
        ..cfg.clone()
    };
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::Config(format!(
            "stage-2 training called with stage {}",
            cfg.stage
        )));
    }
    if let Some(f) = init.fusion {
        if f != cfg.fusion {
            return Err(Error::Config(format!(
                "checkpoint fusion config {f:?} differs from requested {:?}",
                cfg.fusion
            )));
        }
    }
    let train = train_split(data)?;
    let mut model = Model::from_checkpoint(init)?;
    if model.fusion.is_none() {
        model.attach_fusion(cfg.fusion, cfg.seed)?;
    }
    let trace = run_epochs(&mut model, &cfg, &train, on_epoch)?;
    Ok(model.to_checkpoint(2, cfg.loss, cfg.seed, cfg.epochs, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// CL probes against a CB gallery.
    Cl2Cb,
    /// CL probes against a CL gallery, self pairs masked.
    Cl2Cl,
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "cl2cb" => Ok(Protocol::Cl2Cb),
            "cl2cl" => Ok(Protocol::Cl2Cl),
            other => Err(format!("protocol must be cl2cb or cl2cl, got {other:?}")),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Cl2Cb => "cl2cb",
            Protocol::Cl2Cl => "cl2cl",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub stage: u8,
    /// Weight of the fine (stage-2) score in the fused score.
    pub fusion_weight: f64,
    pub far_targets: Vec<f64>,
    pub max_rank: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Cl2Cb,
            stage: 1,
            fusion_weight: 1.0,
            far_targets: vec![0.1, 0.01],
            max_rank: 10,
        }
    }
}

/// Probe and gallery indices of `data` under `protocol`.
pub fn protocol_indices(data: &Dataset, protocol: Protocol) -> Result<(Vec<usize>, Vec<usize>)> {
    let cl = data.indices_of(Modality::Cl);
    if cl.is_empty() {
        return Err(Error::Protocol(format!("{protocol} needs CL samples, none found")));
    }
    let gallery = match protocol {
        Protocol::Cl2Cb => data.indices_of(Modality::Cb),
        Protocol::Cl2Cl => cl.clone(),
    };
    if gallery.is_empty() {
        return Err(Error::Protocol(format!("{protocol} needs CB samples, none found")));
    }
    Ok((cl, gallery))
}

/// Scores between two lists of encoded samples: cosine of global embeddings
/// for stage 1, `fused_score` for stage 2.
pub fn pair_scores(
    model: &Model,
    stage: u8,
    fusion_weight: f64,
    probes: &[&(TokenSet<f32>, GlobalEmbedding<f32>)],
    gallery: &[&(TokenSet<f32>, GlobalEmbedding<f32>)],
) -> Result<Matrix<f64>> {
    let globals_p: Vec<GlobalEmbedding<f32>> = probes.iter().map(|e| e.1.clone()).collect();
    let globals_g: Vec<GlobalEmbedding<f32>> = gallery.iter().map(|e| e.1.clone()).collect();
    let zeros_p = vec![0; probes.len()];
    let zeros_g = vec![0; gallery.len()];
    let global = similarity_matrix(&globals_p, &zeros_p, &globals_g, &zeros_g)?.scores;
    match stage {
        1 => Ok(global),
        2 => {
            let fusion = model.fusion()?;
            fused_score(0.0, 0.0, fusion_weight)?;
            if fusion_weight == 0.0 {
                return Ok(global);
            }
            let tp: Vec<&TokenSet<f32>> = probes.iter().map(|e| &e.0).collect();
            let tg: Vec<&TokenSet<f32>> = gallery.iter().map(|e| &e.0).collect();
            let fine = fusion.score_matrix(&model.store, &tp, &tg)?;
            let data = global
                .as_slice()
                .iter()
                .zip(fine.as_slice())
                .map(|(&g, &f)| fused_score(g, f, fusion_weight))
                .collect::<Result<_>>()?;
            Matrix::from_vec(global.rows(), global.cols(), data)
        }
        s => Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
    }
}

/// Labeled probe × gallery score matrix of `data` under the protocol.
pub fn score_matrix(model: &Model, data: &Dataset, cfg: &EvalConfig) -> Result<SimilarityMatrix> {
    let (probes, gallery) = protocol_indices(data, cfg.protocol)?;
    let images: Vec<&Image> = data.images.iter().collect();
    let encoded = model.encode_all(&images)?;
    let p: Vec<_> = probes.iter().map(|&i| &encoded[i]).collect();
    let g: Vec<_> = gallery.iter().map(|&i| &encoded[i]).collect();
    let scores = pair_scores(model, cfg.stage, cfg.fusion_weight, &p, &g)?;
    let labels = data.labels();
    let mask = probes
        .iter()
        .flat_map(|&i| gallery.iter().map(move |&j| i == j))
        .collect();
    SimilarityMatrix::new(scores, gather(&labels, &probes), gather(&labels, &gallery), mask)
}

/// EER, TAR@FAR and CMC of `data` under the protocol. The caller chooses the split.
pub fn evaluate(model: &Model, data: &Dataset, cfg: &EvalConfig) -> Result<ScoreReport> {
    let s = score_matrix(model, data, cfg)?;
    score_report(&s, &cfg.far_targets, cfg.max_rank)
}
