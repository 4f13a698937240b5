use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use lift3d::config::RunConfig;
use lift3d::dataset::{load_dataset, read_jsonl, write_jsonl, CandidateRecord, Dataset};
use lift3d::features::{read_features, read_index};
use lift3d::geometry::DEFAULT_FOCAL;
use lift3d::lifting::{RobustNorm, DEFAULT_THETA_LIMIT};
use lift3d::prototypes::{load_registry, render_silhouette, PrototypeRegistry};
use lift3d::spatial::{KeypointCandidate, SpatialModelFile};
use lift3d::synth::{CANDIDATES_FILE, DETECTIONS_FILE, FEATURES_FILE, FEATURE_INDEX_FILE, PROTOTYPES_DIR};
use lift3d::{lift_batch, Execution, LiftContext, LiftInput, LiftOptions, LiftResult, Strategy};
use serde::Serialize;

use crate::common::{
    ensure_parent, error_kind, file_token, or_in, read_detections, read_json, read_lifts, LiftFailure, LiftRecord,
    RegressorFile, ViewpointPrediction, LIFTS_FORMAT, MASKS_FORMAT,
};

pub fn registry_path(dataset: &Path, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| dataset.join(PROTOTYPES_DIR).join("prototypes.json"))
}

pub fn load_registry_at(path: &Path) -> Result<PrototypeRegistry> {
    load_registry(path).with_context(|| format!("loading prototype registry {}", path.display()))
}

#[derive(Args, Debug)]
pub struct LiftArgs {
    /// Dataset directory; supplies image sizes and class priors.
    #[arg(long)]
    dataset: PathBuf,
    /// Default: <dataset>/detections.jsonl.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Default: <dataset>/candidates.jsonl.
    #[arg(long)]
    candidates: Option<PathBuf>,
    #[arg(long)]
    spatial: PathBuf,
    /// Azimuth regressor applied to the detection features.
    #[arg(long)]
    regressor: Option<PathBuf>,
    /// Precomputed azimuths from `predict-viewpoint`; overrides `--regressor`.
    #[arg(long)]
    viewpoints: Option<PathBuf>,
    /// Default: <dataset>/features.bin.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Default: <dataset>/features.json.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Default: <dataset>/prototypes/prototypes.json.
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long, default_value = "guided")]
    strategy: Strategy,
    #[arg(long, default_value = "l2")]
    robust: RobustNorm,
    #[arg(long, default_value_t = DEFAULT_FOCAL)]
    focal: f64,
    /// Bound on in-plane rotation, degrees.
    #[arg(long, default_value_t = DEFAULT_THETA_LIMIT)]
    theta_limit: f64,
    /// Weight residuals by candidate score.
    #[arg(long)]
    weight_by_score: bool,
    #[arg(long)]
    out: PathBuf,
}

type DetKey = (String, Option<String>);

/// Azimuth estimates keyed by image and detection id. Entries without a
/// detection id are stored under `None` and match any detection of the image.
fn viewpoint_table(a: &LiftArgs, run: &mut RunConfig) -> Result<BTreeMap<DetKey, f64>> {
    let mut table = BTreeMap::new();
    if let Some(p) = &a.viewpoints {
        *run = run.clone().path("viewpoints", p);
        for v in read_jsonl::<ViewpointPrediction>(p)? {
            table.insert((v.image_id, v.detection_id), v.azimuth);
        }
    } else if let Some(p) = &a.regressor {
        let features = or_in(&a.dataset, &a.features, FEATURES_FILE);
        let index = or_in(&a.dataset, &a.index, FEATURE_INDEX_FILE);
        *run = run.clone().path("regressor", p).path("features", &features).path("index", &index);
        let file: RegressorFile = read_json(p)?;
        let m = read_features(&features)?;
        for e in read_index(&index, &m)? {
            let model = file
                .model_for(e.class.as_deref())
                .with_context(|| format!("no regressor for class {:?}", e.class))?;
            let az = model.predict(m.row(e.row)).with_context(|| format!("feature row {}", e.row))?;
            table.insert((e.image_id, e.detection_id), az);
        }
    }
    Ok(table)
}

fn image_size(ds: &Dataset, image_id: &str) -> Result<(f64, f64)> {
    let img = ds.image(image_id).with_context(|| format!("detection references unknown image {image_id:?}"))?;
    Ok((img.width as f64, img.height as f64))
}

pub fn run(a: LiftArgs, exec: Execution) -> Result<()> {
    let detections_path = or_in(&a.dataset, &a.detections, DETECTIONS_FILE);
    let candidates_path = or_in(&a.dataset, &a.candidates, CANDIDATES_FILE);
    let registry_path = registry_path(&a.dataset, &a.registry);
    let mut run = RunConfig::new("lift")
        .path("dataset", &a.dataset)
        .path("detections", &detections_path)
        .path("candidates", &candidates_path)
        .path("spatial", &a.spatial)
        .path("registry", &registry_path)
        .path("out", &a.out);
    run.strategy = a.strategy;
    run.robust = a.robust;
    run.focal = a.focal;

    let options = LiftOptions {
        strategy: a.strategy,
        focal: a.focal,
        theta_limit: a.theta_limit,
        weight_by_score: a.weight_by_score,
        solver: lift3d::lifting::SolverOptions { norm: a.robust, ..Default::default() },
        ..Default::default()
    };
    run.grad_tol = options.solver.grad_tol;
    run.step_tol = options.solver.step_tol;
    run.max_iter = options.solver.max_iter;
    run.validate().map_err(anyhow::Error::msg)?;

    let ds = load_dataset(&a.dataset)?;
    let registry = load_registry_at(&registry_path)?;
    let spatial: SpatialModelFile = read_json(&a.spatial)?;
    let detections = read_detections(&detections_path)?;
    let candidates: Vec<CandidateRecord> = read_jsonl(&candidates_path)?;
    let viewpoints = viewpoint_table(&a, &mut run)?;
    if let Ok(fit) = serde_json::from_value::<RunConfig>(spatial.config.clone()) {
        run.components = fit.components;
        run.kappa = fit.kappa;
        run.extent_floor = fit.extent_floor;
    }

    let mut by_image: BTreeMap<&str, Vec<&CandidateRecord>> = BTreeMap::new();
    for c in &candidates {
        by_image.entry(&c.image_id).or_default().push(c);
    }
    let per_det: Vec<Vec<KeypointCandidate>> = detections
        .iter()
        .map(|d| {
            by_image
                .get(d.image_id.as_str())
                .into_iter()
                .flatten()
                .filter(|c| c.class.as_deref().is_none_or(|k| k == d.class))
                .map(|c| KeypointCandidate { name: c.name.clone(), position: lift3d::Point2::new(c.x, c.y), score: c.score })
                .collect()
        })
        .collect();
    let inputs = detections
        .iter()
        .zip(&per_det)
        .map(|(d, cands)| {
            let estimate = viewpoints
                .get(&(d.image_id.clone(), d.id.clone()))
                .or_else(|| viewpoints.get(&(d.image_id.clone(), None)))
                .copied()
                .or(d.azimuth);
            Ok(LiftInput {
                detection: d,
                candidates: cands,
                image_size: image_size(&ds, &d.image_id)?,
                azimuth_estimate: estimate,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let ctx = LiftContext { registry: &registry, spatial: &spatial, priors: &ds.priors, options: &options };
    let results = lift_batch(&inputs, &ctx, exec);
    let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
    let records: Vec<LiftRecord> = results
        .into_iter()
        .zip(&inputs)
        .map(|(r, input)| match r {
            Ok(r) => LiftRecord::Lifted(Box::new(r)),
            Err(e) => {
                log::debug!("{}/{}: {e}", input.detection.image_id, input.detection.id.as_deref().unwrap_or("?"));
                *failures.entry(error_kind(&e)).or_default() += 1;
                LiftRecord::Failed(LiftFailure::new(input.detection, input.azimuth_estimate, &e))
            }
        })
        .collect();
    if !failures.is_empty() {
        log::warn!("{} of {} detections not lifted: {failures:?}", failures.values().sum::<usize>(), records.len());
    }
    let header = serde_json::json!({ "format": LIFTS_FORMAT, "config": run });
    write_jsonl(&a.out, Some(&header), &records)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Dataset directory; supplies image sizes.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    lifts: PathBuf,
    /// Default: <dataset>/prototypes/prototypes.json.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Output directory for PBM masks and `masks.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct MaskEntry<'a> {
    image_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    detection_id: Option<&'a str>,
    class: &'a str,
    prototype_id: &'a str,
    file: String,
}

/// Renders the silhouette of a lifted hypothesis at the image resolution.
pub fn render_lift(ds: &Dataset, registry: &PrototypeRegistry, r: &LiftResult) -> Result<lift3d::prototypes::Mask> {
    let proto = registry
        .find(&r.class, &r.prototype_id)
        .with_context(|| format!("prototype {}/{} not in registry", r.class, r.prototype_id))?;
    let img = ds.image(&r.image_id).with_context(|| format!("unknown image {:?}", r.image_id))?;
    Ok(render_silhouette(proto, &r.pose, img.width, img.height))
}

pub fn render(a: RenderArgs, exec: Execution) -> Result<()> {
    let registry_path = registry_path(&a.dataset, &a.registry);
    let run = RunConfig::new("render-mask")
        .path("dataset", &a.dataset)
        .path("lifts", &a.lifts)
        .path("registry", &registry_path)
        .path("out", &a.out);
    let ds = load_dataset(&a.dataset)?;
    let registry = load_registry_at(&registry_path)?;
    let lifted: Vec<LiftResult> = read_lifts(&a.lifts)?
        .into_iter()
        .filter_map(|r| match r {
            LiftRecord::Lifted(r) => Some(*r),
            LiftRecord::Failed(_) => None,
        })
        .collect();
    if lifted.is_empty() {
        bail!("{} holds no successful lifts", a.lifts.display());
    }
    let masks = exec.map(&lifted, |r| render_lift(&ds, &registry, r));

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut entries = Vec::with_capacity(lifted.len());
    for (i, (r, mask)) in lifted.iter().zip(masks).enumerate() {
        let stem = match &r.detection_id {
            Some(id) => format!("{}_{}", file_token(&r.image_id), file_token(id)),
            None => format!("{}_{i}", file_token(&r.image_id)),
        };
        let file = format!("{stem}.pbm");
        let path = a.out.join(&file);
        ensure_parent(&path)?;
        fs::write(&path, mask?.to_pbm()).with_context(|| format!("writing {}", path.display()))?;
        entries.push(MaskEntry {
            image_id: &r.image_id,
            detection_id: r.detection_id.as_deref(),
            class: &r.class,
            prototype_id: &r.prototype_id,
            file,
        });
    }
    let header = serde_json::json!({ "format": MASKS_FORMAT, "config": run });
    write_jsonl(&a.out.join("masks.jsonl"), Some(&header), &entries)?;
    Ok(())
}
