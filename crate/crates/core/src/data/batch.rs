use std::collections::HashMap;

use rand::seq::SliceRandom;

use super::{Modality, Sample};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchConfig {
    /// Identities per batch (P).
    pub ids_per_batch: usize,
    /// Samples per identity and modality (K).
    pub samples_per_id: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            ids_per_batch: 4,
            samples_per_id: 2,
        }
    }
}

/// Indices into the sample list, with dense identity labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub identity_labels: Vec<usize>,
    pub modalities: Vec<Modality>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Dense identity labels in order of first appearance.
pub fn identity_labels(samples: &[Sample]) -> Vec<usize> {
    let mut seen: HashMap<(&str, &str), usize> = HashMap::new();
    samples
        .iter()
        .map(|s| {
            let next = seen.len();
            *seen.entry(s.identity()).or_insert(next)
        })
        .collect()
}

/// One epoch of P-K batches. Each round shuffles the identities and chunks them
/// into groups of P (the last group is padded from the front of the
/// permutation); each identity contributes its next K CL and K CB samples from
/// a per-epoch shuffle. The number of rounds is `min samples per modality / K`.
pub fn make_batch(samples: &[Sample], cfg: BatchConfig, epoch_seed: u64) -> Result<Vec<Batch>> {
    let (p, k) = (cfg.ids_per_batch, cfg.samples_per_id);
    if p < 2 || k == 0 {
        return Err(Error::Config(format!(
            "batches need at least 2 identities and 1 sample each, got P={p}, K={k}"
        )));
    }
    let labels = identity_labels(samples);
    let n_ids = labels.iter().max().map_or(0, |m| m + 1);
    let mut pools: Vec<[Vec<usize>; 2]> = vec![[Vec::new(), Vec::new()]; n_ids];
    for (i, s) in samples.iter().enumerate() {
        pools[labels[i]][(s.modality == Modality::Cb) as usize].push(i);
    }
    let deficient: Vec<String> = pools
        .iter()
        .filter(|pool| pool[0].len() < k || pool[1].len() < k)
        .map(|pool| {
            let s = &samples[pool[0]
                .first()
                .or(pool[1].first())
                .copied()
                .expect("identity has a sample")];
            format!(
                "{}/{} ({} CL, {} CB)",
                s.subject_id,
                s.finger_id,
                pool[0].len(),
                pool[1].len()
            )
        })
        .collect();
    if !deficient.is_empty() {
        return Err(Error::Config(format!(
            "identities with fewer than {k} samples per modality: {}",
            deficient.join(", ")
        )));
    }
    if n_ids < p {
        return Err(Error::Config(format!("{n_ids} identities cannot fill batches of {p}")));
    }
    for (id, pool) in pools.iter_mut().enumerate() {
        for (m, list) in pool.iter_mut().enumerate() {
            list.shuffle(&mut keyed_rng(epoch_seed, "batch-samples", &[id as u64, m as u64]));
        }
    }
    let rounds = pools.iter().flatten().map(Vec::len).min().unwrap_or(0) / k;
    let mut batches = Vec::new();
    for round in 0..rounds {
        let mut order: Vec<usize> = (0..n_ids).collect();
        order.shuffle(&mut keyed_rng(epoch_seed, "batch-ids", &[round as u64]));
        for chunk in order.chunks(p) {
            let mut ids = chunk.to_vec();
            for &extra in &order {
                if ids.len() == p {
                    break;
                }
                if !ids.contains(&extra) {
                    ids.push(extra);
                }
            }
            let mut batch = Batch {
                indices: Vec::with_capacity(2 * p * k),
                identity_labels: Vec::with_capacity(2 * p * k),
                modalities: Vec::with_capacity(2 * p * k),
            };
            for (m, modality) in [Modality::Cl, Modality::Cb].into_iter().enumerate() {
                for &id in &ids {
                    for &i in &pools[id][m][round * k..(round + 1) * k] {
                        batch.indices.push(i);
                        batch.identity_labels.push(id);
                        batch.modalities.push(modality);
                    }
                }
            }
            batches.push(batch);
        }
    }
    Ok(batches)
}
