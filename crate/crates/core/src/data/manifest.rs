use std::path::Path;

use super::{Rotation, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 5] = ["path", "subject_id", "finger_id", "modality", "split"];
const OPTIONAL_COLUMNS: [&str; 1] = ["rotation"];

/// Reads a manifest; relative image paths resolve against the manifest's
/// directory and must exist.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, path, base, true)
}

/// Parses manifest text. `origin` only labels errors.
pub fn parse_manifest(text: &str, origin: &Path, base: &Path, check_paths: bool) -> Result<Vec<Sample>> {
    let err = |line: u64, message: String| Error::Manifest {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let column = |name: &str| header.iter().position(|h| h == name);
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(MANIFEST_HEADER) {
        *slot = column(name).ok_or_else(|| err(1, format!("missing column {name:?}")))?;
    }
    if let Some(extra) = header
        .iter()
        .find(|h| !MANIFEST_HEADER.contains(h) && !OPTIONAL_COLUMNS.contains(h))
    {
        return Err(err(1, format!("unknown column {extra:?}")));
    }
    let rotation_col = column("rotation");

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let rel = field(cols[0]);
        if rel.is_empty() {
            return Err(err(line, "empty path".into()));
        }
        let image_path = base.join(rel);
        if check_paths && !image_path.is_file() {
            return Err(err(line, format!("unreadable image path {}", image_path.display())));
        }
        let rotation = match rotation_col {
            Some(c) => field(c).parse::<Rotation>().map_err(|m| err(line, m))?,
            None => Rotation::NONE,
        };
        samples.push(Sample {
            image_path,
            subject_id: field(cols[1]).to_string(),
            finger_id: field(cols[2]).to_string(),
            modality: field(cols[3]).parse().map_err(|m| err(line, m))?,
            split: field(cols[4]).parse().map_err(|m| err(line, m))?,
            rotation,
        });
    }
    Ok(samples)
}

/// Serializes samples as manifest CSV with paths relative to `base` where possible.
pub fn manifest_csv(samples: &[Sample], base: &Path) -> Result<String> {
    let with_rotation = samples.iter().any(|s| s.rotation != Rotation::NONE);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = MANIFEST_HEADER.to_vec();
    if with_rotation {
        header.push("rotation");
    }
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(csv_err)?;
    for s in samples {
        let path = s.image_path.strip_prefix(base).unwrap_or(&s.image_path);
        let path = path.to_string_lossy().replace('\\', "/");
        let mut row = vec![
            path,
            s.subject_id.clone(),
            s.finger_id.clone(),
            s.modality.to_string(),
            s.split.to_string(),
        ];
        if with_rotation {
            row.push(s.rotation.degrees().to_string());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
