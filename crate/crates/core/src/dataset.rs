//! Dataset schema and ingestion.
//!
//! A dataset directory holds:
//!
//! * `images.json`: `[{"id", "width", "height", "file"?}]`
//! * `objects.jsonl`: one ground-truth object per line, see [`GroundTruthObject`]
//! * `classes.json` (optional): `{class: [keypoint names]}`; when present,
//!   annotated keypoint names are validated against it
//! * mask files referenced by objects, as binary PBM

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::geometry::{clamp_elevation, normalize_azimuth, normalize_signed, BBox, Point2};
use crate::lifting::ClassPriors;
use crate::prototypes::Mask;

pub const IMAGES_FILE: &str = "images.json";
pub const OBJECTS_FILE: &str = "objects.jsonl";
pub const CLASSES_FILE: &str = "classes.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema error in {path}: {field}")]
    Schema { path: String, field: String },
    #[error("{path}: object references unknown image {image_id:?}")]
    DanglingReference { path: String, image_id: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Accepts string or integer identifiers.
pub fn id_string<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        S(String),
        I(i64),
    }
    Ok(match Id::deserialize(d)? {
        Id::S(s) => s,
        Id::I(i) => i.to_string(),
    })
}

fn opt_id_string<'de, D: Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        S(String),
        I(i64),
    }
    Ok(Option::<Id>::deserialize(d)?.map(|id| match id {
        Id::S(s) => s,
        Id::I(i) => i.to_string(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    #[serde(deserialize_with = "id_string")]
    pub id: String,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointAnnotation {
    pub x: f64,
    pub y: f64,
    #[serde(default = "yes")]
    pub visible: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    #[serde(deserialize_with = "id_string")]
    pub image_id: String,
    pub class: String,
    pub bbox: BBox,
    pub azimuth: f64,
    #[serde(default)]
    pub elevation: f64,
    #[serde(default)]
    pub theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
    #[serde(default)]
    pub difficult: bool,
    #[serde(default)]
    pub keypoints: BTreeMap<String, KeypointAnnotation>,
    /// Id of the aligned ground-truth prototype, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype: Option<String>,
    /// Mask path relative to the dataset root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

impl GroundTruthObject {
    pub fn new(image_id: &str, class: &str, bbox: BBox, azimuth: f64) -> Self {
        Self {
            image_id: image_id.into(),
            class: class.into(),
            bbox,
            azimuth,
            elevation: 0.0,
            theta: 0.0,
            distance: None,
            difficult: false,
            keypoints: BTreeMap::new(),
            prototype: None,
            mask: None,
        }
    }

    pub fn visible_keypoints(&self) -> BTreeMap<String, Point2> {
        self.keypoints
            .iter()
            .filter(|(_, k)| k.visible)
            .map(|(n, k)| (n.clone(), Point2::new(k.x, k.y)))
            .collect()
    }
}

/// A scored 2D detection from an external detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(deserialize_with = "id_string")]
    pub image_id: String,
    pub class: String,
    pub bbox: BBox,
    pub score: f64,
    /// Defaults to the line index when absent.
    #[serde(default, deserialize_with = "opt_id_string", skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// Externally estimated azimuth, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub azimuth: Option<f64>,
}

/// One line of a keypoint candidate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    #[serde(deserialize_with = "id_string")]
    pub image_id: String,
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub images: Vec<ImageInfo>,
    pub objects: Vec<GroundTruthObject>,
    pub vocabulary: Option<BTreeMap<String, Vec<String>>>,
    pub priors: BTreeMap<String, ClassPriors>,
}

impl Dataset {
    pub fn image(&self, id: &str) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn classes(&self) -> BTreeSet<&str> {
        self.objects.iter().map(|o| o.class.as_str()).collect()
    }

    pub fn load_mask(&self, obj: &GroundTruthObject) -> Result<Option<Mask>, DatasetError> {
        let Some(rel) = &obj.mask else { return Ok(None) };
        let path = self.root.join(rel);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        Mask::from_pbm(&bytes)
            .map(Some)
            .map_err(|e| DatasetError::Schema { path: path.display().to_string(), field: e.to_string() })
    }

    /// Writes `images.json`, `objects.jsonl` and `classes.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let images = dir.join(IMAGES_FILE);
        fs::write(&images, serde_json::to_string_pretty(&self.images).expect("serialize"))
            .map_err(io_err(&images))?;
        write_jsonl(&dir.join(OBJECTS_FILE), None, &self.objects)?;
        if let Some(vocab) = &self.vocabulary {
            let path = dir.join(CLASSES_FILE);
            fs::write(&path, serde_json::to_string_pretty(vocab).expect("serialize")).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Mean elevation and mean distance per class from ground-truth poses.
/// Classes without any distance annotation get no prior.
pub fn class_priors(objects: &[GroundTruthObject]) -> BTreeMap<String, ClassPriors> {
    let mut acc: BTreeMap<&str, (f64, usize, f64, usize)> = BTreeMap::new();
    for o in objects {
        let e = acc.entry(&o.class).or_default();
        e.0 += o.elevation;
        e.1 += 1;
        if let Some(d) = o.distance.filter(|d| *d > 0.0) {
            e.2 += d;
            e.3 += 1;
        }
    }
    acc.into_iter()
        .filter(|(_, a)| a.3 > 0)
        .map(|(c, (es, en, ds, dn))| {
            (c.to_string(), ClassPriors { elevation: clamp_elevation(es / en as f64), distance: ds / dn as f64 })
        })
        .collect()
}

/// Reads a JSON-lines file. Blank lines are skipped, as is a leading header
/// object carrying a `format` key.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |e: serde_json::Error| DatasetError::Schema {
            path: format!("{}:{}", path.display(), i + 1),
            field: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(schema)?;
        if out.is_empty() && value.get("format").is_some() {
            continue;
        }
        out.push(serde_json::from_value(value).map_err(schema)?);
    }
    Ok(out)
}

/// Writes JSON lines, optionally preceded by a header object.
pub fn write_jsonl<T: Serialize>(path: &Path, header: Option<&serde_json::Value>, items: &[T]) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut buf = Vec::new();
    if let Some(h) = header {
        serde_json::to_writer(&mut buf, h).expect("serialize");
        buf.push(b'\n');
    }
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("serialize");
        buf.push(b'\n');
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(io_err(path))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let images_path = dir.join(IMAGES_FILE);
    let text = fs::read_to_string(&images_path).map_err(io_err(&images_path))?;
    let images: Vec<ImageInfo> = serde_json::from_str(&text).map_err(|e| DatasetError::Schema {
        path: images_path.display().to_string(),
        field: e.to_string(),
    })?;
    let ids: BTreeSet<&str> = images.iter().map(|i| i.id.as_str()).collect();

    let classes_path = dir.join(CLASSES_FILE);
    let vocabulary: Option<BTreeMap<String, Vec<String>>> = if classes_path.exists() {
        let text = fs::read_to_string(&classes_path).map_err(io_err(&classes_path))?;
        Some(serde_json::from_str(&text).map_err(|e| DatasetError::Schema {
            path: classes_path.display().to_string(),
            field: e.to_string(),
        })?)
    } else {
        None
    };

    let objects_path = dir.join(OBJECTS_FILE);
    let mut objects: Vec<GroundTruthObject> = read_jsonl(&objects_path)?;
    for (i, o) in objects.iter_mut().enumerate() {
        let loc = format!("{}:{}", objects_path.display(), i + 1);
        if !ids.contains(o.image_id.as_str()) {
            return Err(DatasetError::DanglingReference { path: loc, image_id: o.image_id.clone() });
        }
        let finite = [o.azimuth, o.elevation, o.theta].iter().all(|v| v.is_finite());
        if !finite {
            return Err(DatasetError::Schema { path: loc, field: "non-finite angle".into() });
        }
        if !(0.0..360.0).contains(&o.azimuth) {
            let a = normalize_azimuth(o.azimuth);
            log::warn!("{loc}: azimuth {} normalized to {a}", o.azimuth);
            o.azimuth = a;
        }
        o.elevation = clamp_elevation(o.elevation);
        o.theta = normalize_signed(o.theta);
        if let Some(vocab) = &vocabulary {
            let names = vocab.get(&o.class).ok_or_else(|| DatasetError::Schema {
                path: loc.clone(),
                field: format!("class {:?} missing from {CLASSES_FILE}", o.class),
            })?;
            if let Some(bad) = o.keypoints.keys().find(|k| !names.contains(k)) {
                return Err(DatasetError::Schema {
                    path: loc,
                    field: format!("keypoints.{bad}: not in vocabulary of class {:?}", o.class),
                });
            }
        }
    }
    let priors = class_priors(&objects);
    Ok(Dataset { root: dir.to_path_buf(), images, objects, vocabulary, priors })
}

/// Square training box around a keypoint whose area is a fixed fraction of
/// the object box area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointBoxRule {
    pub area_fraction: f64,
}

impl Default for KeypointBoxRule {
    fn default() -> Self {
        Self { area_fraction: 0.30 }
    }
}

impl KeypointBoxRule {
    /// No clipping to the image; callers clip if they need to.
    pub fn keypoint_box(&self, kp: Point2, object: &BBox) -> BBox {
        let side = (self.area_fraction * object.area()).sqrt();
        BBox::centered(kp, side, side).expect("positive side for a valid object box")
    }
}

pub fn keypoint_box(kp: Point2, object: &BBox) -> BBox {
    KeypointBoxRule::default().keypoint_box(kp, object)
}
