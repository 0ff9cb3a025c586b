//! Dataset manifest and matrix file formats.
//!
//! Binary matrix layout (little endian):
//!
//! ```text
//! offset 0   8 bytes  magic "BHOCONN\x01"
//! offset 8   u64      n
//! offset 16  u32      dtype code (1 = f64)
//! offset 20  u32      reserved, zero
//! offset 24  n*n f64  row-major payload
//! ```
//!
//! Files ending in `.csv` are read as comma-separated rows without a header.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::matrix::{ConnectivityMatrix, SYMMETRIZE_TOLERANCE};
use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 8] = b"BHOCONN\x01";
pub const DTYPE_F64: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    /// 0 = control, 1 = patient.
    pub label: usize,
    pub matrix: ConnectivityMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub n: usize,
    pub subjects: Vec<SubjectRecord>,
    pub atlas_labels: Option<Vec<String>>,
    /// Ground-truth node sets for synthetic data.
    pub planted_subgraphs: Option<Vec<Vec<usize>>>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for s in &self.subjects {
            if s.matrix.n() != self.n {
                return Err(Error::ShapeMismatch(format!(
                    "subject {}: node count {} != dataset node count {}",
                    s.id,
                    s.matrix.n(),
                    self.n
                )));
            }
            if s.label > 1 {
                return Err(Error::InvariantViolation {
                    subject: s.id.clone(),
                    reason: format!("label {} is not 0 or 1", s.label),
                });
            }
        }
        for class in 0..2 {
            if !self.subjects.iter().any(|s| s.label == class) {
                return Err(Error::TooFewSubjects(format!("no subjects of class {class}")));
            }
        }
        if let Some(labels) = &self.atlas_labels {
            if labels.len() != self.n {
                return Err(Error::MissingAtlasLabels);
            }
        }
        if let Some(sets) = &self.planted_subgraphs {
            if sets.iter().flatten().any(|&i| i >= self.n) {
                return Err(Error::InvalidSpec("planted node index out of range".into()));
            }
        }
        Ok(())
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.id == id)
    }

    /// Subset in the given id order.
    pub fn select(&self, ids: &[String]) -> Vec<&SubjectRecord> {
        ids.iter().filter_map(|id| self.subject(id)).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    atlas_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    planted_subgraphs: Option<Vec<Vec<usize>>>,
    subjects: Vec<SubjectEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectEntry {
    id: String,
    label: usize,
    matrix: PathBuf,
}

fn parse_err(path: &Path, msg: impl ToString) -> Error {
    Error::ParseError {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

pub fn read_matrix_binary(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix_binary(&bytes).map_err(|msg| parse_err(path, msg))
}

pub fn decode_matrix_binary(bytes: &[u8]) -> std::result::Result<Array2<f64>, String> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MATRIX_MAGIC {
        return Err("bad magic or truncated header".into());
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let dtype = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    if dtype != DTYPE_F64 {
        return Err(format!("unsupported dtype code {dtype}"));
    }
    let expected = n
        .checked_mul(n)
        .and_then(|c| c.checked_mul(8))
        .ok_or("matrix size overflows")?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(format!(
            "payload is {} bytes, expected {expected} for n={n}",
            payload.len()
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((n, n), data).expect("length checked"))
}

pub fn encode_matrix_binary(m: &Array2<f64>) -> Vec<u8> {
    assert_eq!(m.nrows(), m.ncols(), "binary format stores square matrices");
    let mut out = Vec::with_capacity(HEADER_LEN + m.len() * 8);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_matrix_binary(path: &Path, m: &Array2<f64>) -> Result<()> {
    fs::write(path, encode_matrix_binary(m)).map_err(|e| Error::io(path, e))
}

/// Reads a comma-separated numeric table (any shape).
pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(path, format!("line {}: {e}", lineno + 1)))?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::ShapeMismatch(format!(
            "{}: ragged CSV rows",
            path.display()
        )));
    }
    let nrows = rows.len();
    Array2::from_shape_vec((nrows, cols), rows.into_iter().flatten().collect())
        .map_err(|e| parse_err(path, e))
}

pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut text = String::new();
    for row in m.rows() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_matrix_any(path: &Path) -> Result<Array2<f64>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => read_matrix_csv(path),
        _ => read_matrix_binary(path),
    }
}

/// Loads and validates a manifest plus every matrix it references. Matrix
/// paths are resolved relative to the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| parse_err(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let subjects = file
        .subjects
        .par_iter()
        .map(|entry| {
            let path = base.join(&entry.matrix);
            let raw = read_matrix_any(&path)?;
            if raw.nrows() != file.n || raw.ncols() != file.n {
                return Err(Error::ShapeMismatch(format!(
                    "subject {}: matrix is {}x{}, manifest says n={}",
                    entry.id,
                    raw.nrows(),
                    raw.ncols(),
                    file.n
                )));
            }
            let matrix = ConnectivityMatrix::validate(raw, &entry.id, SYMMETRIZE_TOLERANCE)?;
            Ok(SubjectRecord {
                id: entry.id.clone(),
                label: entry.label,
                matrix,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let ds = DatasetManifest {
        n: file.n,
        subjects,
        atlas_labels: file.atlas_labels,
        planted_subgraphs: file.planted_subgraphs,
    };
    ds.validate()?;
    Ok(ds)
}

/// Serialized manifest text for `ds` with matrices under `matrices/`.
pub fn manifest_json(ds: &DatasetManifest) -> String {
    let file = ManifestFile {
        n: ds.n,
        atlas_labels: ds.atlas_labels.clone(),
        planted_subgraphs: ds.planted_subgraphs.clone(),
        subjects: ds
            .subjects
            .iter()
            .map(|s| SubjectEntry {
                id: s.id.clone(),
                label: s.label,
                matrix: PathBuf::from("matrices").join(format!("{}.bin", s.id)),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("manifest serializes");
    text.push('\n');
    text
}

/// Writes `manifest.json` and one binary matrix per subject into `dir`.
/// Returns the manifest path.
pub fn write_dataset(ds: &DatasetManifest, dir: &Path) -> Result<PathBuf> {
    let mdir = dir.join("matrices");
    fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
    for s in &ds.subjects {
        write_matrix_binary(
            &mdir.join(format!("{}.bin", s.id)),
            &s.matrix.values().to_owned(),
        )?;
    }
    let path = dir.join("manifest.json");
    fs::write(&path, manifest_json(ds)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
