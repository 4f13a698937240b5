//! File formats and helpers shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lift3d::dataset::{read_jsonl, Detection};
use lift3d::geometry::BBox;
use lift3d::lifting::LiftError;
use lift3d::regression::Regressor;
use lift3d::LiftResult;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const LIFTS_FORMAT: &str = "lifts/1";
pub const REGRESSOR_FORMAT: &str = "regressor/1";
pub const VIEWPOINTS_FORMAT: &str = "viewpoints/1";
pub const MASKS_FORMAT: &str = "masks/1";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())),
        None => Ok(()),
    }
}

/// `given` if set, else `name` inside the dataset directory.
pub fn or_in(dataset: &Path, given: &Option<PathBuf>, name: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| dataset.join(name))
}

/// Detections with missing ids replaced by their line index.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let mut dets: Vec<Detection> = read_jsonl(path)?;
    for (i, d) in dets.iter_mut().enumerate() {
        d.id.get_or_insert_with(|| i.to_string());
    }
    Ok(dets)
}

/// A detection that could not be lifted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftFailure {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_id: Option<String>,
    pub class: String,
    pub bbox: BBox,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub azimuth_estimate: Option<f64>,
    pub error: String,
    pub message: String,
}

impl LiftFailure {
    pub fn new(det: &Detection, azimuth_estimate: Option<f64>, err: &LiftError) -> Self {
        Self {
            image_id: det.image_id.clone(),
            detection_id: det.id.clone(),
            class: det.class.clone(),
            bbox: det.bbox,
            score: det.score,
            azimuth_estimate,
            error: error_kind(err).into(),
            message: err.to_string(),
        }
    }
}

pub fn error_kind(err: &LiftError) -> &'static str {
    match err {
        LiftError::TooFewCorrespondences(_) => "too-few-correspondences",
        LiftError::NoVisibleKeypoints => "no-visible-keypoints",
        LiftError::DivergedBehindCamera => "diverged-behind-camera",
        LiftError::MissingPriors(_) => "missing-priors",
        LiftError::NoProtoForClass(_) => "no-proto-for-class",
        LiftError::MissingSpatialModel(_) => "missing-spatial-model",
        LiftError::MissingViewpoint => "missing-viewpoint",
        LiftError::InvalidCorrespondence(_) => "invalid-correspondence",
        LiftError::Spatial(_) => "spatial",
    }
}

/// One line of a lifts file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LiftRecord {
    Lifted(Box<LiftResult>),
    Failed(LiftFailure),
}

pub fn read_lifts(path: &Path) -> Result<Vec<LiftRecord>> {
    Ok(read_jsonl(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: usize,
    pub grid: Vec<f64>,
    /// Mean absolute azimuth error per grid entry.
    pub scores: Vec<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub model: Regressor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<CvReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorFile {
    pub format: String,
    pub config: serde_json::Value,
    pub models: Vec<ModelEntry>,
}

impl RegressorFile {
    /// The class-specific model if there is one, else the shared model.
    pub fn model_for(&self, class: Option<&str>) -> Option<&Regressor> {
        let specific = class.and_then(|c| self.models.iter().find(|m| m.model.class.as_deref() == Some(c)));
        specific.or_else(|| self.models.iter().find(|m| m.model.class.is_none())).map(|m| &m.model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointPrediction {
    pub row: usize,
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub azimuth: f64,
}

/// Class names made safe for file names.
pub fn file_token(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn write_csv<R, I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    R: IntoIterator<Item = String>,
    I: IntoIterator<Item = R>,
{
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}
