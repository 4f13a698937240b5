//! Binary feature matrices with a JSON row index.
//!
//! Layout (little endian): the 8-byte magic `LFT3FEAT`, `u32` rows, `u32`
//! columns, then `rows * cols` `f64` values in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::regression::{RegressionError, TrainingSet};

pub const FEATURE_MAGIC: &[u8; 8] = b"LFT3FEAT";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Regression(#[from] RegressionError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Option<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return None;
        }
        Some(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
            return Err("bad magic".into());
        }
        let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != rows * cols * 8 {
            return Err(format!("expected {} data bytes, found {}", rows * cols * 8, body.len()));
        }
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { rows, cols, data })
    }
}

/// Sidecar entry tying a matrix row to a detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndexEntry {
    pub row: usize,
    #[serde(deserialize_with = "crate::dataset::id_string")]
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    /// Ground-truth azimuth, present for training rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub azimuth: Option<f64>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, msg: impl Into<String>) -> FeatureError {
    FeatureError::Format { path: path.display().to_string(), msg: msg.into() }
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<(), FeatureError> {
    fs::write(path, m.to_bytes()).map_err(io(path))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix, FeatureError> {
    let bytes = fs::read(path).map_err(io(path))?;
    FeatureMatrix::from_bytes(&bytes).map_err(|m| format_err(path, m))
}

pub fn write_index(path: &Path, index: &[FeatureIndexEntry]) -> Result<(), FeatureError> {
    fs::write(path, serde_json::to_string_pretty(index).expect("serialize")).map_err(io(path))
}

/// Reads the index and checks every row reference against `m`.
pub fn read_index(path: &Path, m: &FeatureMatrix) -> Result<Vec<FeatureIndexEntry>, FeatureError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let index: Vec<FeatureIndexEntry> = serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    if let Some(bad) = index.iter().find(|e| e.row >= m.rows()) {
        return Err(format_err(path, format!("row {} out of range ({} rows)", bad.row, m.rows())));
    }
    Ok(index)
}

/// Rows with a known azimuth, optionally restricted to one class.
pub fn training_set(m: &FeatureMatrix, index: &[FeatureIndexEntry], class: Option<&str>) -> Result<TrainingSet, FeatureError> {
    let (x, y): (Vec<Vec<f64>>, Vec<f64>) = index
        .iter()
        .filter(|e| class.is_none_or(|c| e.class.as_deref() == Some(c)))
        .filter_map(|e| e.azimuth.map(|a| (m.row(e.row).to_vec(), crate::geometry::normalize_azimuth(a))))
        .unzip();
    Ok(TrainingSet::new(x, y)?)
}
