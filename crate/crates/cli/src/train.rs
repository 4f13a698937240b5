use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use lift3d::config::RunConfig;
use lift3d::dataset::{load_dataset, write_jsonl};
use lift3d::features::{read_features, read_index, training_set};
use lift3d::regression::{select_lambda, train as train_model, Penalty, TrainConfig, UnwrapMode};
use lift3d::spatial::{fit_spatial as fit_class, SpatialAnnotation, SpatialModelFile, DEFAULT_EXTENT_FLOOR, DEFAULT_KAPPA};

use crate::common::{
    read_json, write_json, CvReport, ModelEntry, RegressorFile, ViewpointPrediction, REGRESSOR_FORMAT,
    VIEWPOINTS_FORMAT,
};

#[derive(Args, Debug)]
pub struct FitSpatialArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Viewpoint components per class.
    #[arg(long, default_value_t = 8)]
    components: usize,
    /// Region half-size in standard deviations.
    #[arg(long, default_value_t = DEFAULT_KAPPA)]
    kappa: f64,
    /// Minimum region half-extent as a fraction of the box size.
    #[arg(long, default_value_t = DEFAULT_EXTENT_FLOOR)]
    extent_floor: f64,
    /// Restrict to one class; default is every annotated class.
    #[arg(long)]
    class: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

pub fn fit_spatial(a: FitSpatialArgs) -> Result<()> {
    let mut run = RunConfig::new("fit-spatial").path("dataset", &a.dataset).path("out", &a.out);
    run.components = a.components;
    run.kappa = a.kappa;
    run.extent_floor = a.extent_floor;
    run.validate().map_err(anyhow::Error::msg)?;

    let ds = load_dataset(&a.dataset)?;
    let classes: Vec<String> = match &a.class {
        Some(c) => vec![c.clone()],
        None => ds.classes().into_iter().map(String::from).collect(),
    };
    let mut models = Vec::new();
    for class in &classes {
        let anns: Vec<SpatialAnnotation> = ds
            .objects
            .iter()
            .filter(|o| &o.class == class && !o.difficult)
            .map(|o| SpatialAnnotation { bbox: o.bbox, azimuth: o.azimuth, keypoints: o.visible_keypoints() })
            .collect();
        let model = fit_class(class, &anns, a.components, a.kappa, a.extent_floor)
            .with_context(|| format!("fitting spatial model for class {class:?}"))?;
        models.push(model);
    }
    if models.is_empty() {
        bail!("dataset {} has no annotated objects", a.dataset.display());
    }
    write_json(&a.out, &SpatialModelFile::new(models, run.to_json()))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Binary feature matrix.
    #[arg(long)]
    features: PathBuf,
    /// Row index with azimuth targets.
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value = "ridge")]
    penalty: Penalty,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Elastic-net mixing weight of the L1 term.
    #[arg(long, default_value_t = 0.5)]
    l1_ratio: f64,
    #[arg(long)]
    no_intercept: bool,
    #[arg(long)]
    no_standardize: bool,
    #[arg(long, default_value = "raw")]
    unwrap_mode: UnwrapMode,
    /// One model per class instead of a shared one.
    #[arg(long)]
    per_class: bool,
    /// Pick lambda by k-fold cross-validation over `--lambda-grid`.
    #[arg(long)]
    cv_folds: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.1,1,10,100")]
    lambda_grid: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut run =
        RunConfig::new("train-regressor").path("features", &a.features).path("index", &a.index).path("out", &a.out);
    run.penalty = a.penalty;
    run.lambda = a.lambda;
    run.l1_ratio = a.l1_ratio;
    run.unwrap_mode = a.unwrap_mode;
    run.validate().map_err(anyhow::Error::msg)?;

    let m = read_features(&a.features)?;
    let index = read_index(&a.index, &m)?;
    let cfg = TrainConfig {
        penalty: a.penalty,
        lambda: a.lambda,
        l1_ratio: a.l1_ratio,
        fit_intercept: !a.no_intercept,
        standardize: !a.no_standardize,
        unwrap_mode: a.unwrap_mode,
        ..Default::default()
    };
    let groups: Vec<Option<String>> = if a.per_class {
        let mut cs: Vec<String> = index.iter().filter_map(|e| e.class.clone()).collect();
        cs.sort();
        cs.dedup();
        cs.into_iter().map(Some).collect()
    } else {
        vec![None]
    };

    let mut models = Vec::new();
    for class in groups {
        let label = class.as_deref().unwrap_or("all rows");
        let data = training_set(&m, &index, class.as_deref())?;
        let (cfg, cv) = match a.cv_folds {
            Some(folds) => {
                let (lambda, scores) = select_lambda(&data, &cfg, &a.lambda_grid, folds)
                    .with_context(|| format!("cross-validating {label}"))?;
                log::info!("{label}: lambda {lambda} by {folds}-fold cross-validation");
                let report = CvReport { folds, grid: a.lambda_grid.clone(), scores, lambda };
                (TrainConfig { lambda, ..cfg.clone() }, Some(report))
            }
            None => (cfg.clone(), None),
        };
        let mut model = train_model(&data, &cfg).with_context(|| format!("training on {label}"))?;
        model.class = class;
        models.push(ModelEntry { model, cv });
    }
    write_json(&a.out, &RegressorFile { format: REGRESSOR_FORMAT.into(), config: run.to_json(), models })
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Output JSON lines, one prediction per index row.
    #[arg(long)]
    out: PathBuf,
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let run = RunConfig::new("predict-viewpoint")
        .path("model", &a.model)
        .path("features", &a.features)
        .path("index", &a.index)
        .path("out", &a.out);
    let file: RegressorFile = read_json(&a.model)?;
    let m = read_features(&a.features)?;
    let index = read_index(&a.index, &m)?;
    let preds = index
        .iter()
        .map(|e| {
            let model = file
                .model_for(e.class.as_deref())
                .with_context(|| format!("no model for class {:?}", e.class))?;
            Ok(ViewpointPrediction {
                row: e.row,
                image_id: e.image_id.clone(),
                detection_id: e.detection_id.clone(),
                class: e.class.clone(),
                azimuth: model.predict(m.row(e.row)).with_context(|| format!("row {}", e.row))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let header = serde_json::json!({ "format": VIEWPOINTS_FORMAT, "config": run });
    write_jsonl(&a.out, Some(&header), &preds)?;
    Ok(())
}
