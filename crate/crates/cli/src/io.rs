//! File output and the embedding and score CSV formats.

use std::io::Write;
use std::path::{Path, PathBuf};

use ridgematch_core::data::{load_manifest, Sample};
use ridgematch_core::Checkpoint;

use crate::CliError;

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| CliError::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

/// Manifest samples with each path as written in the manifest (relative to its directory).
pub struct ManifestRows {
    pub samples: Vec<Sample>,
    pub paths: Vec<String>,
}

pub fn read_manifest(path: &Path) -> Result<ManifestRows, CliError> {
    let samples = load_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let paths = samples
        .iter()
        .map(|s| {
            let p = s.image_path.strip_prefix(base).unwrap_or(&s.image_path);
            p.to_string_lossy().replace('\\', "/")
        })
        .collect();
    Ok(ManifestRows { samples, paths })
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| CliError::Usage(format!("csv buffer: {e}")))
}

/// `sample_path,subject_id,finger_id,modality,e_0,…` in manifest order.
pub fn embeddings_csv(rows: &ManifestRows, embeddings: &[Vec<f32>]) -> Result<Vec<u8>, CliError> {
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut header: Vec<String> = ["sample_path", "subject_id", "finger_id", "modality"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dim).map(|k| format!("e_{k}")));
    let body = rows.samples.iter().zip(&rows.paths).zip(embeddings).map(|((s, p), e)| {
        let mut r = vec![
            p.clone(),
            s.subject_id.clone(),
            s.finger_id.clone(),
            s.modality.to_string(),
        ];
        r.extend(e.iter().map(|v| v.to_string()));
        r
    });
    csv_bytes(&header, body)
}

/// `probe_path,gallery_path,score` over the full probe × gallery matrix, row-major.
pub fn scores_csv(probes: &[String], gallery: &[String], scores: &[f64]) -> Result<Vec<u8>, CliError> {
    let header = ["probe_path", "gallery_path", "score"].map(String::from);
    let n = gallery.len();
    let body = scores
        .iter()
        .enumerate()
        .map(|(k, s)| vec![probes[k / n].clone(), gallery[k % n].clone(), s.to_string()]);
    csv_bytes(&header, body)
}

/// One row of a score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub probe: String,
    pub gallery: String,
    pub score: f64,
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["probe_path", "gallery_path", "score"] {
        return Err(CliError::Data(format!(
            "{}: expected header probe_path,gallery_path,score",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let score: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| CliError::Data(format!("{}, line {line}: bad score {:?}", path.display(), &rec[2])))?;
        out.push(ScoreRow {
            probe: rec[0].to_string(),
            gallery: rec[1].to_string(),
            score,
        });
    }
    Ok(out)
}
