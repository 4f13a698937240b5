use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use lift3d::config::RunConfig;
use lift3d::dataset::{load_dataset, read_jsonl, CandidateRecord, Dataset, GroundTruthObject};
use lift3d::geometry::iou;
use lift3d::metrics::{
    aavp, app, avp_binned, average_precision, class_means, default_aavp_grid, seg_accuracy, ApMode,
    KeypointPrediction, PRCurve, ScoredPrediction, APP_PIXEL_THRESHOLD, APP_REFERENCE_HEIGHT, IOU_THRESHOLD,
};
use lift3d::prototypes::Mask;
use lift3d::{Execution, LiftResult};

use crate::common::{file_token, read_detections, read_lifts, write_csv, write_json, LiftRecord};
use crate::lift::{load_registry_at, registry_path, render_lift};

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Detection average precision.
    Ap(EvalArgs),
    /// Average viewpoint precision with V discrete azimuth bins.
    Avp(AvpArgs),
    /// AVP as a function of the allowed azimuth error, and its mean.
    Aavp(EvalArgs),
    /// Average pixel precision of keypoint predictions.
    App(AppArgs),
    /// Segmentation accuracy of rendered lifts inside ground-truth boxes.
    Seg(SegArgs),
}

impl EvalCommand {
    pub fn name(&self) -> &'static str {
        match self {
            EvalCommand::Ap(_) => "eval ap",
            EvalCommand::Avp(_) => "eval avp",
            EvalCommand::Aavp(_) => "eval aavp",
            EvalCommand::App(_) => "eval app",
            EvalCommand::Seg(_) => "eval seg",
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Ground-truth dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Lifts from `lift`; azimuths come from the fitted poses.
    #[arg(long, conflicts_with = "detections")]
    lifts: Option<PathBuf>,
    /// Plain detections, with an optional `azimuth` field.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Output directory for curves and the summary.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "allpoints")]
    ap_mode: ApMode,
}

#[derive(Args, Debug)]
pub struct AvpArgs {
    #[command(flatten)]
    common: EvalArgs,
    /// Numbers of azimuth bins.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,24")]
    views: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct AppArgs {
    #[command(flatten)]
    common: EvalArgs,
    /// Keypoint predictions; default is the reprojected keypoints of `--lifts`.
    #[arg(long)]
    candidates: Option<PathBuf>,
    #[arg(long, default_value_t = APP_REFERENCE_HEIGHT)]
    reference_height: f64,
    #[arg(long, default_value_t = APP_PIXEL_THRESHOLD)]
    pixel_threshold: f64,
}

#[derive(Args, Debug)]
pub struct SegArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    lifts: PathBuf,
    /// Default: <dataset>/prototypes/prototypes.json.
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

struct Loaded {
    ds: Dataset,
    preds: Vec<ScoredPrediction>,
    lifts: Vec<LiftRecord>,
    classes: Vec<String>,
    run: RunConfig,
}

fn load(a: &EvalArgs, metric: &str) -> Result<Loaded> {
    let mut run = RunConfig::new(&format!("eval {metric}")).path("dataset", &a.dataset).path("out", &a.out);
    run.ap_mode = a.ap_mode;
    let ds = load_dataset(&a.dataset)?;
    let (preds, lifts) = match (&a.lifts, &a.detections) {
        (Some(p), _) => {
            run = run.path("lifts", p);
            let lifts = read_lifts(p)?;
            let preds = lifts
                .iter()
                .map(|r| match r {
                    LiftRecord::Lifted(r) => prediction(r, Some(r.pose.azimuth())),
                    LiftRecord::Failed(f) => ScoredPrediction {
                        image_id: f.image_id.clone(),
                        class: f.class.clone(),
                        bbox: f.bbox,
                        score: f.score,
                        azimuth: f.azimuth_estimate,
                    },
                })
                .collect();
            (preds, lifts)
        }
        (None, Some(p)) => {
            run = run.path("detections", p);
            let preds = read_detections(p)?
                .into_iter()
                .map(|d| ScoredPrediction {
                    image_id: d.image_id,
                    class: d.class,
                    bbox: d.bbox,
                    score: d.score,
                    azimuth: d.azimuth,
                })
                .collect();
            (preds, Vec::new())
        }
        (None, None) => bail!("one of --lifts or --detections is required"),
    };
    let classes: Vec<String> = ds.classes().into_iter().map(String::from).collect();
    if classes.is_empty() {
        bail!("dataset {} has no ground-truth objects", a.dataset.display());
    }
    Ok(Loaded { ds, preds, lifts, classes, run })
}

fn prediction(r: &LiftResult, azimuth: Option<f64>) -> ScoredPrediction {
    ScoredPrediction { image_id: r.image_id.clone(), class: r.class.clone(), bbox: r.bbox, score: r.score, azimuth }
}

impl Loaded {
    fn gts(&self, class: &str) -> Vec<GroundTruthObject> {
        self.ds.objects.iter().filter(|o| o.class == class).cloned().collect()
    }

    fn preds(&self, class: &str, need_azimuth: bool) -> Vec<ScoredPrediction> {
        let all: Vec<ScoredPrediction> = self.preds.iter().filter(|p| p.class == class).cloned().collect();
        if !need_azimuth {
            return all;
        }
        let n = all.len();
        let kept: Vec<ScoredPrediction> = all.into_iter().filter(|p| p.azimuth.is_some()).collect();
        if kept.len() < n {
            log::warn!("{class}: {} predictions without azimuth ignored", n - kept.len());
        }
        kept
    }
}

type SummaryRow = (String, String, f64);

fn write_summary(out: &Path, metric: &str, rows: &[SummaryRow], run: &RunConfig) -> Result<()> {
    write_csv(
        &out.join(format!("{metric}_summary.csv")),
        &["metric", "class", "value"],
        rows.iter().map(|(m, c, v)| [m.clone(), c.clone(), v.to_string()]),
    )?;
    write_json(&out.join(format!("{metric}_config.json")), run)
}

fn write_pr(path: &Path, c: &PRCurve) -> Result<()> {
    write_csv(
        path,
        &["recall", "precision"],
        c.recall.iter().zip(&c.precision).map(|(r, p)| [r.to_string(), p.to_string()]),
    )
}

/// Appends the mean over classes of every metric present in `rows`.
fn with_means(mut rows: Vec<SummaryRow>) -> Vec<SummaryRow> {
    let mut acc: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for (m, c, v) in &rows {
        acc.entry(m.clone()).or_default().push((c.clone(), *v));
    }
    for (m, scores) in acc {
        rows.push((m, "mean".into(), class_means(&scores).1));
    }
    rows
}

pub fn run(cmd: EvalCommand, exec: Execution) -> Result<()> {
    match cmd {
        EvalCommand::Ap(a) => eval_ap(&a, exec),
        EvalCommand::Avp(a) => eval_avp(&a, exec),
        EvalCommand::Aavp(a) => eval_aavp(&a, exec),
        EvalCommand::App(a) => eval_app(&a, exec),
        EvalCommand::Seg(a) => eval_seg(&a, exec),
    }
}

fn eval_ap(a: &EvalArgs, exec: Execution) -> Result<()> {
    let l = load(a, "ap")?;
    let curves = exec.map(&l.classes, |c| average_precision(&l.preds(c, false), &l.gts(c), a.ap_mode));
    let mut rows = Vec::new();
    for (c, curve) in l.classes.iter().zip(&curves) {
        write_pr(&a.out.join(format!("ap_{}.csv", file_token(c))), curve)?;
        rows.push(("ap".into(), c.clone(), curve.average));
    }
    write_summary(&a.out, "ap", &with_means(rows), &l.run)
}

fn eval_avp(a: &AvpArgs, exec: Execution) -> Result<()> {
    let e = &a.common;
    if a.views.contains(&0) {
        bail!("--views entries must be >= 1");
    }
    let l = load(e, "avp")?;
    let per_class = exec.map(&l.classes, |c| {
        let (preds, gts) = (l.preds(c, true), l.gts(c));
        a.views.iter().map(|&v| avp_binned(&preds, &gts, v, e.ap_mode)).collect::<Result<Vec<_>, _>>()
    });
    let mut rows = Vec::new();
    for (c, curves) in l.classes.iter().zip(per_class) {
        for (v, curve) in a.views.iter().zip(curves?) {
            write_pr(&e.out.join(format!("avp{v}_{}.csv", file_token(c))), &curve)?;
            rows.push((format!("avp{v}"), c.clone(), curve.average));
        }
    }
    write_summary(&e.out, "avp", &with_means(rows), &l.run)
}

fn eval_aavp(a: &EvalArgs, exec: Execution) -> Result<()> {
    let l = load(a, "aavp")?;
    let grid = default_aavp_grid();
    let per_class = exec.map(&l.classes, |c| {
        let (preds, gts) = (l.preds(c, true), l.gts(c));
        let ap = average_precision(&l.preds(c, false), &gts, a.ap_mode).average;
        aavp(&preds, &gts, &grid, a.ap_mode).map(|r| (ap, r))
    });
    let mut rows = Vec::new();
    for (c, res) in l.classes.iter().zip(per_class) {
        let (ap, r) = res?;
        write_csv(
            &a.out.join(format!("aavp_{}.csv", file_token(c))),
            &["D", "avp"],
            r.grid.iter().zip(&r.avp).map(|(d, v)| [d.to_string(), v.to_string()]),
        )?;
        rows.push(("ap".into(), c.clone(), ap));
        rows.push(("aavp".into(), c.clone(), r.aavp));
    }
    write_summary(&a.out, "aavp", &with_means(rows), &l.run)
}

fn eval_app(a: &AppArgs, exec: Execution) -> Result<()> {
    let e = &a.common;
    let mut l = load(e, "app")?;
    let kps: Vec<KeypointPrediction> = match &a.candidates {
        Some(p) => {
            l.run = l.run.clone().path("candidates", p);
            read_jsonl::<CandidateRecord>(p)?
                .into_iter()
                .map(|c| KeypointPrediction {
                    image_id: c.image_id,
                    class: c.class,
                    name: c.name,
                    position: lift3d::Point2::new(c.x, c.y),
                    score: c.score,
                })
                .collect()
        }
        None => {
            if l.lifts.is_empty() {
                bail!("eval app needs --candidates or --lifts");
            }
            l.lifts
                .iter()
                .filter_map(|r| match r {
                    LiftRecord::Lifted(r) => Some(r),
                    LiftRecord::Failed(_) => None,
                })
                .flat_map(|r| {
                    r.keypoints.iter().map(move |k| KeypointPrediction {
                        image_id: r.image_id.clone(),
                        class: Some(r.class.clone()),
                        name: k.name.clone(),
                        position: k.reprojection,
                        score: r.score,
                    })
                })
                .collect()
        }
    };
    let per_class = exec.map(&l.classes, |c| {
        let preds: Vec<KeypointPrediction> =
            kps.iter().filter(|k| k.class.as_deref().is_none_or(|k| k == c)).cloned().collect();
        app(&preds, &l.gts(c), a.reference_height, a.pixel_threshold, e.ap_mode)
    });
    let mut rows = Vec::new();
    for (c, curves) in l.classes.iter().zip(per_class) {
        let curves = curves?;
        for (name, curve) in &curves {
            write_pr(&e.out.join(format!("app_{}_{}.csv", file_token(c), file_token(name))), curve)?;
            rows.push((format!("app:{name}"), c.clone(), curve.average));
        }
        rows.push(("app".into(), c.clone(), lift3d::metrics::mean_app(&curves)));
    }
    write_summary(&e.out, "app", &with_means(rows), &l.run)
}

/// The lift of the same image and class with the highest box overlap, at
/// least the detection threshold. Ties go to the higher score.
fn best_lift<'a>(gt: &GroundTruthObject, lifts: &[&'a LiftResult]) -> Option<&'a LiftResult> {
    lifts
        .iter()
        .filter(|r| r.image_id == gt.image_id && r.class == gt.class)
        .map(|r| (iou(&r.bbox, &gt.bbox), *r))
        .filter(|(o, _)| *o >= IOU_THRESHOLD)
        .max_by(|a, b| a.0.total_cmp(&b.0).then(a.1.score.total_cmp(&b.1.score)))
        .map(|(_, r)| r)
}

fn eval_seg(a: &SegArgs, exec: Execution) -> Result<()> {
    let registry_path = registry_path(&a.dataset, &a.registry);
    let run = RunConfig::new("eval seg")
        .path("dataset", &a.dataset)
        .path("lifts", &a.lifts)
        .path("registry", &registry_path)
        .path("out", &a.out);
    let ds = load_dataset(&a.dataset)?;
    let registry = load_registry_at(&registry_path)?;
    let records = read_lifts(&a.lifts)?;
    let lifted: Vec<&LiftResult> = records
        .iter()
        .filter_map(|r| match r {
            LiftRecord::Lifted(r) => Some(r.as_ref()),
            LiftRecord::Failed(_) => None,
        })
        .collect();
    // only objects with an aligned ground-truth prototype and a mask count
    let objects: Vec<&GroundTruthObject> =
        ds.objects.iter().filter(|o| !o.difficult && o.prototype.is_some() && o.mask.is_some()).collect();
    if objects.is_empty() {
        bail!("dataset {} has no objects with ground-truth masks", a.dataset.display());
    }
    let scores = exec.map(&objects, |o| -> Result<f64> {
        let gt = ds.load_mask(o)?.expect("filtered on mask");
        let pred = match best_lift(o, &lifted) {
            Some(r) => render_lift(&ds, &registry, r)?,
            None => Mask::new(gt.width(), gt.height()),
        };
        seg_accuracy(&pred, &gt, &o.bbox).with_context(|| format!("object in image {:?}", o.image_id))
    });
    let scores: Vec<(String, f64)> = objects
        .iter()
        .zip(scores)
        .map(|(o, s)| s.map(|s| (o.class.clone(), s)))
        .collect::<Result<_>>()?;
    write_csv(
        &a.out.join("seg_instances.csv"),
        &["image_id", "class", "accuracy"],
        objects.iter().zip(&scores).map(|(o, (c, s))| [o.image_id.clone(), c.clone(), s.to_string()]),
    )?;
    let (per_class, _) = class_means(&scores);
    let rows: Vec<SummaryRow> = per_class.into_iter().map(|(c, v)| ("seg".into(), c, v)).collect();
    write_summary(&a.out, "seg", &with_means(rows), &run)
}
