//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! preset = desk
//! epochs = 120
//! lr_milestones = 60, 100
//! ```
//!
//! `preset` (desk, full, full-finetune) picks the starting values and is
//! applied before every other key regardless of its position. Setting `epochs`
//! without `lr_milestones` moves the milestones to 60% / 85% of the run.

use std::path::Path;

use ridgematch_core::trainer::default_milestones;
use ridgematch_core::TrainConfig;

use crate::CliError;

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "preset",
    "seed",
    "epochs",
    "base_lr",
    "lr_milestones",
    "lr_decay",
    "ids_per_batch",
    "samples_per_id",
    "alpha_pos",
    "alpha_neg",
    "tau",
    "margin",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "clip_norm",
    "train_encoder",
    "image_size",
    "patch_size",
    "width",
    "layers",
    "heads",
    "mlp_hidden",
    "head_hidden",
    "embed_dim",
    "fusion_blocks",
    "fusion_heads",
    "fusion_mlp_hidden",
];

/// Environment variable overriding the default seed.
pub const SEED_ENV: &str = "RIDGEMATCH_SEED";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    /// Where the entry came from, for error messages.
    pub origin: String,
}

/// Parses config text into entries, rejecting unknown keys and malformed lines.
pub fn parse_entries(text: &str, origin: &str) -> Result<Vec<Entry>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = format!("{origin}:{}", n + 1);
        out.push(parse_assignment(line, &at)?);
    }
    Ok(out)
}

/// One `key=value` assignment, as in a config line or `--set`.
pub fn parse_assignment(text: &str, origin: &str) -> Result<Entry, CliError> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("{origin}: expected key = value, got {text:?}")))?;
    let key = key.trim();
    if !KEYS.contains(&key) {
        return Err(CliError::Usage(format!("{origin}: unknown config key {key:?}")));
    }
    Ok(Entry {
        key: key.to_string(),
        value: value.trim().to_string(),
        origin: origin.to_string(),
    })
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_entries(&text, &path.display().to_string())
}

fn preset(name: &str, stage: u8) -> Option<TrainConfig> {
    Some(match (name, stage) {
        ("desk", 1) => TrainConfig::desk_stage1(),
        ("desk", _) => TrainConfig::desk_stage2(),
        ("full", 1) => TrainConfig::full_stage1(),
        ("full", _) => TrainConfig::full_stage2(),
        ("full-finetune", 1) => TrainConfig::full_finetune(),
        _ => return None,
    })
}

fn value<T: std::str::FromStr>(e: &Entry) -> Result<T, CliError> {
    e.value
        .parse()
        .map_err(|_| CliError::Usage(format!("{}: invalid value {:?} for {}", e.origin, e.value, e.key)))
}

/// Builds the training configuration for `stage` from entries applied in
/// order. The seed defaults to [`SEED_ENV`] when set.
pub fn build(stage: u8, entries: &[Entry], env_seed: Option<&str>) -> Result<TrainConfig, CliError> {
    let preset_entry = entries.iter().rev().find(|e| e.key == "preset");
    let name = preset_entry.map_or("desk", |e| e.value.as_str());
    let mut cfg = preset(name, stage).ok_or_else(|| {
        let origin = preset_entry.map_or("preset", |e| e.origin.as_str());
        CliError::Usage(format!("{origin}: no preset {name:?} for stage {stage}"))
    })?;
    if let Some(s) = env_seed {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}: invalid seed {s:?}")))?;
    }
    let mut milestones_set = false;
    for e in entries {
        match e.key.as_str() {
            "preset" => {}
            "seed" => cfg.seed = value(e)?,
            "epochs" => {
                cfg.epochs = value(e)?;
                if !milestones_set {
                    cfg.lr_milestones = default_milestones(cfg.epochs);
                }
            }
            "base_lr" => cfg.base_lr = value(e)?,
            "lr_milestones" => {
                milestones_set = true;
                cfg.lr_milestones = e
                    .value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| CliError::Usage(format!("{}: invalid lr_milestones {:?}", e.origin, e.value)))?;
            }
            "lr_decay" => cfg.lr_decay = value(e)?,
            "ids_per_batch" => cfg.batch.ids_per_batch = value(e)?,
            "samples_per_id" => cfg.batch.samples_per_id = value(e)?,
            "alpha_pos" => cfg.loss.alpha_pos = value(e)?,
            "alpha_neg" => cfg.loss.alpha_neg = value(e)?,
            "tau" => cfg.loss.tau = value(e)?,
            "margin" => cfg.loss.margin = value(e)?,
            "weight_decay" => cfg.adamw.weight_decay = value(e)?,
            "beta1" => cfg.adamw.beta1 = value(e)?,
            "beta2" => cfg.adamw.beta2 = value(e)?,
            "adam_eps" => cfg.adamw.eps = value(e)?,
            "clip_norm" => cfg.clip_norm = value(e)?,
            "train_encoder" => cfg.train_encoder = value(e)?,
            "image_size" => cfg.encoder.image_size = value(e)?,
            "patch_size" => cfg.encoder.patch_size = value(e)?,
            "width" => cfg.encoder.width = value(e)?,
            "layers" => cfg.encoder.layers = value(e)?,
            "heads" => cfg.encoder.heads = value(e)?,
            "mlp_hidden" => cfg.encoder.mlp_hidden = value(e)?,
            "head_hidden" => cfg.encoder.head_hidden = value(e)?,
            "embed_dim" => cfg.encoder.embed_dim = value(e)?,
            "fusion_blocks" => cfg.fusion.blocks = value(e)?,
            "fusion_heads" => cfg.fusion.heads = value(e)?,
            "fusion_mlp_hidden" => cfg.fusion.mlp_hidden = value(e)?,
            other => unreachable!("key {other} passed validation"),
        }
    }
    Ok(cfg)
}
