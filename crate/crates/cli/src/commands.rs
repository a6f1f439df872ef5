//! Subcommand definitions and their implementations.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ridgematch_core::data::{manifest_csv, synth_corpus, SynthConfig};
use ridgematch_core::metrics::score_report;
use ridgematch_core::trainer::{evaluate, pair_scores, resume_stage1, train_stage1, train_stage2, EpochLog};
use ridgematch_core::{Dataset, EvalConfig, Matrix, Model, Protocol, SimilarityMatrix, Split};

use crate::config::{self, Entry, SEED_ENV};
use crate::io::{self, atomic_write, read_checkpoint, read_manifest, ManifestRows};
use crate::report;
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "ridgematch", version, about = "Two-stage transformer fingerprint matcher")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus and its manifest.
    Synth(SynthArgs),
    /// Train stage 1 (encoder) or stage 2 (fusion) and write a checkpoint.
    Train(TrainArgs),
    /// Write the global embedding of every manifest sample.
    Embed(EmbedArgs),
    /// Score every probe against every gallery sample.
    Match(MatchArgs),
    /// Compute EER, TAR@FAR and CMC from a score file or a checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub identities: usize,
    #[arg(long, default_value_t = 4)]
    pub samples_per_modality: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "32x32", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Put the last N identities in the test split.
    #[arg(long, default_value_t = 0)]
    pub test_identities: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Flat key=value config file; see the README for the keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint to start from (required for stage 2).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one config key, e.g. `--set tau=0.4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// Defaults to the checkpoint's stage.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: Option<u8>,
    /// Weight of the fine score in the stage-2 fused score.
    #[arg(long, default_value_t = 1.0)]
    pub fusion_weight: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score file written by `match`; labels come from `--manifest`.
    #[arg(long, conflicts_with_all = ["checkpoint", "protocol", "split", "stage"])]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sample manifest. With `--scores`, repeat it to cover probe and gallery paths.
    #[arg(long)]
    pub manifest: Vec<PathBuf>,
    /// cl2cb or cl2cl.
    #[arg(long)]
    pub protocol: Option<Protocol>,
    /// Evaluate only one split of the manifest.
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: Option<u8>,
    #[arg(long, default_value_t = 1.0)]
    pub fusion_weight: f64,
    /// FAR operating point. Repeatable; defaults to 0.01 and 0.1.
    #[arg(long)]
    pub far: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub max_rank: usize,
    /// Key=value report; a text version goes to `<out>.txt` and standard output.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("expected HxW, got {s:?}"))
    };
    Ok((parse(h)?, parse(w)?))
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Embed(a) => embed(&a),
        Command::Match(a) => match_cmd(&a),
        Command::Eval(a) => eval(&a),
    }
}

fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        identities: a.identities,
        samples_per_modality: a.samples_per_modality,
        height: a.size.0,
        width: a.size.1,
        seed: a.seed,
        test_identities: a.test_identities,
    };
    let corpus = synth_corpus(&cfg)?;
    for (s, img) in corpus.samples.iter().zip(&corpus.images) {
        atomic_write(&a.out.join(&s.image_path), &img.png_bytes()?)?;
    }
    let manifest = manifest_csv(&corpus.samples, Path::new(""))?;
    atomic_write(&a.out.join("manifest.csv"), manifest.as_bytes())?;
    println!(
        "wrote {} images and {}",
        corpus.images.len(),
        a.out.join("manifest.csv").display()
    );
    Ok(())
}

fn flag_entry(key: &str, value: impl ToString, flag: &str) -> Entry {
    Entry {
        key: key.into(),
        value: value.to_string(),
        origin: flag.into(),
    }
}

fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut entries = match &a.config {
        Some(p) => config::read_entries(p)?,
        None => Vec::new(),
    };
    for s in &a.overrides {
        entries.push(config::parse_assignment(s, "--set")?);
    }
    if let Some(e) = a.epochs {
        entries.push(flag_entry("epochs", e, "--epochs"));
    }
    if let Some(s) = a.seed {
        entries.push(flag_entry("seed", s, "--seed"));
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = config::build(a.stage, &entries, env_seed.as_deref())?;

    let init = match (&a.init, a.stage) {
        (Some(p), _) => Some(read_checkpoint(p)?),
        (None, 2) => return Err(CliError::Usage("stage 2 training requires --init <checkpoint>".into())),
        (None, _) => None,
    };
    let size = init.as_ref().map_or(cfg.encoder.image_size, |c| c.encoder.image_size);
    let rows = read_manifest(&a.manifest)?;
    let data = Dataset::load(rows.samples, (size, size))?;

    println!("epoch,loss,lr");
    let mut log = |l: &EpochLog| println!("{},{},{}", l.epoch + 1, l.loss, l.lr);
    let ck = match &init {
        None => train_stage1(&cfg, &data, &mut log)?,
        Some(init) if a.stage == 1 => resume_stage1(&cfg, &data, init, &mut log)?,
        Some(init) => train_stage2(&cfg, &data, init, &mut log)?,
    };
    atomic_write(&a.out, &ck.to_bytes())
}

struct Loaded {
    rows: ManifestRows,
    data: Dataset,
}

fn load_for(model: &Model, manifest: &Path) -> Result<Loaded, CliError> {
    let rows = read_manifest(manifest)?;
    let s = model.encoder.config.image_size;
    let data = Dataset::load(rows.samples.clone(), (s, s))?;
    Ok(Loaded { rows, data })
}

fn embed(a: &EmbedArgs) -> Result<(), CliError> {
    let model = Model::from_checkpoint(&read_checkpoint(&a.checkpoint)?)?;
    let loaded = load_for(&model, &a.manifest)?;
    let images: Vec<_> = loaded.data.images.iter().collect();
    let vectors: Vec<Vec<f32>> = model
        .encode_all(&images)?
        .into_iter()
        .map(|(_, g)| g.values().to_vec())
        .collect();
    atomic_write(&a.out, &io::embeddings_csv(&loaded.rows, &vectors)?)
}

fn match_cmd(a: &MatchArgs) -> Result<(), CliError> {
    let ck = read_checkpoint(&a.checkpoint)?;
    let stage = a.stage.unwrap_or(ck.stage);
    let model = Model::from_checkpoint(&ck)?;
    let probe = load_for(&model, &a.probe)?;
    let gallery = load_for(&model, &a.gallery)?;
    if probe.data.is_empty() || gallery.data.is_empty() {
        return Err(CliError::Data(format!(
            "empty probe or gallery ({} probes, {} gallery samples)",
            probe.data.len(),
            gallery.data.len()
        )));
    }
    let enc_p = model.encode_all(&probe.data.images.iter().collect::<Vec<_>>())?;
    let enc_g = model.encode_all(&gallery.data.images.iter().collect::<Vec<_>>())?;
    let scores = pair_scores(
        &model,
        stage,
        a.fusion_weight,
        &enc_p.iter().collect::<Vec<_>>(),
        &enc_g.iter().collect::<Vec<_>>(),
    )?;
    let csv = io::scores_csv(&probe.rows.paths, &gallery.rows.paths, scores.as_slice())?;
    atomic_write(&a.out, &csv)
}

fn far_targets(a: &EvalArgs) -> Vec<f64> {
    if a.far.is_empty() {
        vec![0.01, 0.1]
    } else {
        a.far.clone()
    }
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let fars = far_targets(a);
    let (report, context) = match (&a.scores, &a.checkpoint) {
        (Some(scores), None) => {
            if a.manifest.is_empty() {
                return Err(CliError::Usage(
                    "--scores needs at least one --manifest for labels".into(),
                ));
            }
            let s = labeled_scores(scores, &a.manifest)?;
            (
                score_report(&s, &fars, a.max_rank)?,
                vec![("source", "scores".to_string())],
            )
        }
        (None, Some(checkpoint)) => {
            let protocol = a
                .protocol
                .ok_or_else(|| CliError::Usage("--checkpoint requires --protocol cl2cb|cl2cl".into()))?;
            let [manifest] = a.manifest.as_slice() else {
                return Err(CliError::Usage("--checkpoint takes exactly one --manifest".into()));
            };
            let ck = read_checkpoint(checkpoint)?;
            let stage = a.stage.unwrap_or(ck.stage);
            let model = Model::from_checkpoint(&ck)?;
            let mut data = load_for(&model, manifest)?.data;
            if let Some(split) = a.split {
                data = data.split(split);
            }
            let cfg = EvalConfig {
                protocol,
                stage,
                fusion_weight: a.fusion_weight,
                far_targets: fars,
                max_rank: a.max_rank,
            };
            let mut context = vec![("protocol", protocol.to_string()), ("stage", stage.to_string())];
            if stage == 2 {
                context.push(("fusion_weight", a.fusion_weight.to_string()));
            }
            if let Some(split) = a.split {
                context.push(("split", split.to_string()));
            }
            (evaluate(&model, &data, &cfg)?, context)
        }
        _ => {
            return Err(CliError::Usage(
                "eval needs either --scores or --checkpoint (not both)".into(),
            ))
        }
    };
    let text = report::text(&report, &context);
    atomic_write(&a.out, report::key_values(&report, &context).as_bytes())?;
    let mut txt = a.out.clone().into_os_string();
    txt.push(".txt");
    atomic_write(Path::new(&txt), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

/// Builds the labeled probe × gallery matrix of a score file. Probes and
/// gallery entries keep their first-appearance order; every combination must
/// appear exactly once; entries whose two paths are equal are masked.
pub fn labeled_scores(scores: &Path, manifests: &[PathBuf]) -> Result<SimilarityMatrix, CliError> {
    let mut identity: HashMap<String, (String, String)> = HashMap::new();
    for m in manifests {
        let rows = read_manifest(m)?;
        for (s, p) in rows.samples.iter().zip(rows.paths) {
            identity.insert(p, (s.subject_id.clone(), s.finger_id.clone()));
        }
    }
    let rows = io::read_scores(scores)?;
    let mut probes: Vec<&str> = Vec::new();
    let mut gallery: Vec<&str> = Vec::new();
    let mut probe_idx: HashMap<&str, usize> = HashMap::new();
    let mut gallery_idx: HashMap<&str, usize> = HashMap::new();
    for r in &rows {
        probe_idx.entry(&r.probe).or_insert_with(|| {
            probes.push(&r.probe);
            probes.len() - 1
        });
        gallery_idx.entry(&r.gallery).or_insert_with(|| {
            gallery.push(&r.gallery);
            gallery.len() - 1
        });
    }
    let (m, n) = (probes.len(), gallery.len());
    if rows.len() != m * n {
        return Err(CliError::Data(format!(
            "{}: {} rows do not cover the {m}×{n} probe × gallery matrix",
            scores.display(),
            rows.len()
        )));
    }
    let mut values = vec![f64::NAN; m * n];
    for r in &rows {
        let k = probe_idx[r.probe.as_str()] * n + gallery_idx[r.gallery.as_str()];
        if !values[k].is_nan() {
            return Err(CliError::Data(format!(
                "{}: duplicate pair {} / {}",
                scores.display(),
                r.probe,
                r.gallery
            )));
        }
        values[k] = r.score;
    }
    let mut ids: HashMap<&(String, String), usize> = HashMap::new();
    let mut label = |path: &str| -> Result<usize, CliError> {
        let key = identity
            .get(path)
            .ok_or_else(|| CliError::Data(format!("no manifest lists {path:?}")))?;
        let next = ids.len();
        Ok(*ids.entry(key).or_insert(next))
    };
    let row_labels = probes.iter().map(|p| label(p)).collect::<Result<Vec<_>, _>>()?;
    let col_labels = gallery.iter().map(|g| label(g)).collect::<Result<Vec<_>, _>>()?;
    let mask = (0..m * n).map(|k| probes[k / n] == gallery[k % n]).collect();
    Ok(SimilarityMatrix::new(
        Matrix::from_vec(m, n, values)?,
        row_labels,
        col_labels,
        mask,
    )?)
}
