//! Joint prototype selection and camera fitting from pooled 2D keypoints.
//!
//! For a detection, keypoint candidates are pooled with the class spatial
//! model, every prototype of the class is aligned to them by bounded
//! least squares, and the prototype/pose pair with the smallest mean
//! reprojection error is returned.

mod solver;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Detection;
use crate::exec::Execution;
use crate::geometry::{normalize_azimuth, project, BBox, CameraPose, Point2, DEFAULT_FOCAL, MAX_ELEVATION};
use crate::prototypes::{Prototype, PrototypeRegistry};
use crate::spatial::{pool_keypoints, KeypointCandidate, SpatialError, SpatialModel, SpatialModelFile};

pub use solver::{RobustNorm, SolverOptions, HUBER_DELTA};
use solver::{params_from_pose, pose_from_params, Bounds, Problem, Residual};

/// Azimuth offsets in degrees tried around the initial estimate.
pub const DEFAULT_RESTARTS: [f64; 3] = [0.0, 15.0, -15.0];
pub const DEFAULT_THETA_LIMIT: f64 = 45.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LiftError {
    #[error("need at least 3 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("no keypoint matches the prototype vocabulary")]
    NoVisibleKeypoints,
    #[error("all restarts left model points behind the camera")]
    DivergedBehindCamera,
    #[error("no priors for class {0}")]
    MissingPriors(String),
    #[error("no prototype for class {0}")]
    NoProtoForClass(String),
    #[error("no spatial model for class {0}")]
    MissingSpatialModel(String),
    #[error("guided strategy needs an azimuth estimate")]
    MissingViewpoint,
    #[error("invalid correspondence: {0}")]
    InvalidCorrespondence(String),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
}

/// Per-class initialization priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPriors {
    /// Mean elevation in degrees.
    pub elevation: f64,
    /// Mean camera distance in world units.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub name: String,
    pub point: Point2,
    pub weight: f64,
}

impl Correspondence {
    pub fn new(name: &str, point: Point2) -> Self {
        Self { name: name.to_string(), point, weight: 1.0 }
    }
}

/// Box constraints on the pose, angles in degrees. Azimuth is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseBounds {
    pub elevation: [f64; 2],
    pub theta: [f64; 2],
    pub distance: [f64; 2],
    pub tx: [f64; 2],
    pub ty: [f64; 2],
}

impl PoseBounds {
    /// Distance within `[0.5, 10] x prior`, translation within twice the
    /// image extent on either side.
    pub fn new(prior_distance: f64, width: f64, height: f64, theta_limit: f64) -> Self {
        Self {
            elevation: [-90.0, MAX_ELEVATION],
            theta: [-theta_limit, theta_limit],
            distance: [0.5 * prior_distance, 10.0 * prior_distance],
            tx: [-2.0 * width, 2.0 * width],
            ty: [-2.0 * height, 2.0 * height],
        }
    }

    pub fn contains(&self, pose: &CameraPose) -> bool {
        let inside = |v: f64, b: [f64; 2]| v >= b[0] && v <= b[1];
        let t = pose.translation();
        inside(pose.elevation(), self.elevation)
            && inside(crate::geometry::normalize_signed(pose.theta()), self.theta)
            && inside(pose.distance(), self.distance)
            && inside(t.x, self.tx)
            && inside(t.y, self.ty)
    }

    fn solver_bounds(&self) -> Bounds {
        Bounds {
            lower: [
                f64::NEG_INFINITY,
                self.elevation[0].to_radians(),
                self.theta[0].to_radians(),
                self.distance[0],
                self.tx[0],
                self.ty[0],
            ],
            upper: [
                f64::INFINITY,
                self.elevation[1].to_radians(),
                self.theta[1].to_radians(),
                self.distance[1],
                self.tx[1],
                self.ty[1],
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub pose: CameraPose,
    /// Weighted mean pixel distance at `pose`.
    pub residual: f64,
    /// Optimizer cost at `pose` and at the starting point.
    pub objective: f64,
    pub initial_objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Correspondences whose names exist on the prototype, paired with the
/// model points.
fn pair<'a>(proto: &'a Prototype, corrs: &[Correspondence]) -> Result<Vec<Residual<'a>>, LiftError> {
    let mut out = Vec::with_capacity(corrs.len());
    for c in corrs {
        if !c.point.is_finite() || !(c.weight >= 0.0 && c.weight.is_finite()) {
            return Err(LiftError::InvalidCorrespondence(c.name.clone()));
        }
        if let Some(k) = proto.keypoints.get(&c.name) {
            out.push(Residual { observed: c.point, model: k, weight: c.weight });
        }
    }
    Ok(out)
}

fn checked_pairs<'a>(proto: &'a Prototype, corrs: &[Correspondence]) -> Result<Vec<Residual<'a>>, LiftError> {
    if corrs.len() < 3 {
        return Err(LiftError::TooFewCorrespondences(corrs.len()));
    }
    let pairs = pair(proto, corrs)?;
    match pairs.len() {
        0 => Err(LiftError::NoVisibleKeypoints),
        n if n < 3 => Err(LiftError::TooFewCorrespondences(n)),
        _ if pairs.iter().all(|r| r.weight == 0.0) => {
            Err(LiftError::InvalidCorrespondence("all weights are zero".into()))
        }
        _ => Ok(pairs),
    }
}

/// Weighted mean unsquared reprojection error.
pub fn mean_residual(proto: &Prototype, corrs: &[Correspondence], pose: &CameraPose) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for c in corrs {
        let Some(k) = proto.keypoints.get(&c.name) else { continue };
        num += c.weight * project(pose, k).ok()?.distance(&c.point);
        den += c.weight;
    }
    (den > 0.0).then(|| num / den)
}

/// Moves the start point away from the camera until every model point is
/// in front of it, doubling the distance up to the upper bound.
fn feasible_start(problem: &Problem, start: solver::Params, bounds: &Bounds) -> Option<solver::Params> {
    let mut q = bounds.clamp(&start);
    loop {
        if problem.cost(&q).is_some() {
            return Some(q);
        }
        if q[3] >= bounds.upper[3] {
            return None;
        }
        q[3] = (q[3] * 2.0).min(bounds.upper[3]);
    }
}

fn run(
    proto: &Prototype,
    corrs: &[Correspondence],
    init: &CameraPose,
    bounds: &PoseBounds,
    free: &[bool; 6],
    opts: &SolverOptions,
) -> Result<FitOutcome, LiftError> {
    let residuals = checked_pairs(proto, corrs)?;
    let problem = Problem { residuals, focal: init.focal(), norm: opts.norm };
    let sb = bounds.solver_bounds();
    let start = feasible_start(&problem, params_from_pose(init), &sb).ok_or(LiftError::DivergedBehindCamera)?;
    let sol = problem.solve(&start, free, &sb, opts).ok_or(LiftError::DivergedBehindCamera)?;
    let pose = pose_from_params(&sol.params, init.focal()).ok_or(LiftError::DivergedBehindCamera)?;
    let residual = mean_residual(proto, corrs, &pose).ok_or(LiftError::DivergedBehindCamera)?;
    Ok(FitOutcome {
        pose,
        residual,
        objective: sol.cost,
        initial_objective: sol.initial_cost,
        converged: sol.converged,
        iterations: sol.iterations,
    })
}

/// Bounded local fit of all six pose parameters starting at `init`.
pub fn fit_pose(
    proto: &Prototype,
    corrs: &[Correspondence],
    init: &CameraPose,
    bounds: &PoseBounds,
    opts: &SolverOptions,
) -> Result<FitOutcome, LiftError> {
    run(proto, corrs, init, bounds, &[true; 6], opts)
}

/// Starting pose: azimuth from the estimate, elevation from the class
/// mean, no roll; distance and translation are then fitted with the
/// angles frozen, starting from the class-mean distance and the centroid
/// of the observed points.
pub fn init_pose(
    azimuth: f64,
    priors: &ClassPriors,
    proto: &Prototype,
    corrs: &[Correspondence],
    bounds: &PoseBounds,
    focal: f64,
    opts: &SolverOptions,
) -> Result<CameraPose, LiftError> {
    let pairs = checked_pairs(proto, corrs)?;
    let wsum: f64 = pairs.iter().map(|r| r.weight).sum();
    let cx = pairs.iter().map(|r| r.weight * r.observed.x).sum::<f64>() / wsum;
    let cy = pairs.iter().map(|r| r.weight * r.observed.y).sum::<f64>() / wsum;
    let clamp = |v: f64, b: [f64; 2]| v.clamp(b[0], b[1]);
    let start = CameraPose::new(
        normalize_azimuth(azimuth),
        clamp(priors.elevation, bounds.elevation),
        clamp(0.0, bounds.theta),
        clamp(priors.distance, bounds.distance),
        Point2::new(clamp(cx, bounds.tx), clamp(cy, bounds.ty)),
        focal,
    )
    .map_err(|_| LiftError::DivergedBehindCamera)?;
    Ok(run(proto, corrs, &start, bounds, &[false, false, false, true, true, true], opts)?.pose)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// One component, chosen by the azimuth estimate.
    #[default]
    Guided,
    /// Every component; the lowest residual wins.
    BestObjective,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "guided" => Ok(Self::Guided),
            "best-objective" => Ok(Self::BestObjective),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftOptions {
    pub strategy: Strategy,
    pub solver: SolverOptions,
    pub restarts: Vec<f64>,
    pub theta_limit: f64,
    pub focal: f64,
    /// Weight residuals by candidate score instead of uniformly.
    pub weight_by_score: bool,
}

impl Default for LiftOptions {
    fn default() -> Self {
        Self {
            strategy: Strategy::Guided,
            solver: SolverOptions::default(),
            restarts: DEFAULT_RESTARTS.to_vec(),
            theta_limit: DEFAULT_THETA_LIMIT,
            focal: DEFAULT_FOCAL,
            weight_by_score: false,
        }
    }
}

/// Initializes at each restart offset around `azimuth`, fits, and keeps
/// the lowest final objective. Earlier restarts win ties.
pub fn fit_with_restarts(
    proto: &Prototype,
    corrs: &[Correspondence],
    azimuth: f64,
    priors: &ClassPriors,
    bounds: &PoseBounds,
    opts: &LiftOptions,
) -> Result<FitOutcome, LiftError> {
    let mut best: Option<FitOutcome> = None;
    let mut last_err = LiftError::DivergedBehindCamera;
    let offsets: &[f64] = if opts.restarts.is_empty() { &[0.0] } else { &opts.restarts };
    for off in offsets {
        let fit = init_pose(azimuth + off, priors, proto, corrs, bounds, opts.focal, &opts.solver)
            .and_then(|init| fit_pose(proto, corrs, &init, bounds, &opts.solver));
        match fit {
            Ok(f) => {
                if best.as_ref().is_none_or(|b| f.objective < b.objective) {
                    best = Some(f);
                }
            }
            Err(e @ (LiftError::TooFewCorrespondences(_) | LiftError::NoVisibleKeypoints)) => return Err(e),
            Err(e) => last_err = e,
        }
    }
    best.ok_or(last_err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftedKeypoint {
    pub name: String,
    pub observed: Point2,
    pub score: f64,
    pub reprojection: Point2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftResult {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_id: Option<String>,
    pub class: String,
    pub bbox: BBox,
    pub score: f64,
    pub prototype_id: String,
    pub prototype_index: usize,
    pub pose: CameraPose,
    pub residual: f64,
    pub converged: bool,
    pub component_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub azimuth_estimate: Option<f64>,
    pub keypoints: Vec<LiftedKeypoint>,
}

/// Read-only models shared by all detections.
#[derive(Debug, Clone, Copy)]
pub struct LiftContext<'a> {
    pub registry: &'a PrototypeRegistry,
    pub spatial: &'a SpatialModelFile,
    pub priors: &'a BTreeMap<String, ClassPriors>,
    pub options: &'a LiftOptions,
}

/// One detection to lift.
#[derive(Debug, Clone)]
pub struct LiftInput<'a> {
    pub detection: &'a Detection,
    pub candidates: &'a [KeypointCandidate],
    /// Image width and height in pixels.
    pub image_size: (f64, f64),
    pub azimuth_estimate: Option<f64>,
}

struct Best {
    component: usize,
    proto: usize,
    fit: FitOutcome,
    pooled: Vec<KeypointCandidate>,
}

#[allow(clippy::too_many_arguments)]
fn lift_component(
    model: &SpatialModel,
    component: usize,
    seed: f64,
    protos: &[Prototype],
    input: &LiftInput,
    priors: &ClassPriors,
    bounds: &PoseBounds,
    opts: &LiftOptions,
    best: &mut Option<Best>,
) -> Result<(), LiftError> {
    let pooled: Vec<KeypointCandidate> =
        pool_keypoints(model, component, &input.detection.bbox, input.candidates)?.into_values().collect();
    if pooled.is_empty() {
        return Err(LiftError::NoVisibleKeypoints);
    }
    let corrs: Vec<Correspondence> = pooled
        .iter()
        .map(|c| Correspondence {
            name: c.name.clone(),
            point: c.position,
            weight: if opts.weight_by_score { c.score.max(0.0) } else { 1.0 },
        })
        .collect();
    let mut err = None;
    for (i, proto) in protos.iter().enumerate() {
        match fit_with_restarts(proto, &corrs, seed, priors, bounds, opts) {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| fit.residual < b.fit.residual) {
                    *best = Some(Best { component, proto: i, fit, pooled: pooled.clone() });
                }
            }
            Err(e) => {
                log::debug!("prototype {} skipped: {e}", proto.id);
                err = Some(e);
            }
        }
    }
    err.map_or(Ok(()), Err)
}

/// Lifts one detection to a prototype and pose.
pub fn lift(input: &LiftInput, ctx: &LiftContext) -> Result<LiftResult, LiftError> {
    let det = input.detection;
    let protos = ctx.registry.class(&det.class);
    if protos.is_empty() {
        return Err(LiftError::NoProtoForClass(det.class.clone()));
    }
    let model = ctx.spatial.get(&det.class).ok_or_else(|| LiftError::MissingSpatialModel(det.class.clone()))?;
    let priors = ctx.priors.get(&det.class).ok_or_else(|| LiftError::MissingPriors(det.class.clone()))?;
    let opts = ctx.options;
    let bounds = PoseBounds::new(priors.distance, input.image_size.0, input.image_size.1, opts.theta_limit);

    let seeds: Vec<(usize, f64)> = match opts.strategy {
        Strategy::Guided => {
            let est = input.azimuth_estimate.ok_or(LiftError::MissingViewpoint)?;
            vec![(model.select_component_guided(est), est)]
        }
        Strategy::BestObjective => model
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| (i, input.azimuth_estimate.unwrap_or(c.azimuth_center)))
            .collect(),
    };

    let mut best = None;
    let mut first_err = None;
    for (comp, seed) in seeds {
        if let Err(e) = lift_component(model, comp, seed, protos, input, priors, &bounds, opts, &mut best) {
            // Prefer errors that say more than "nothing pooled".
            if first_err.is_none() || matches!(first_err, Some(LiftError::NoVisibleKeypoints)) {
                first_err = Some(e);
            }
        }
    }
    let Some(best) = best else {
        return Err(first_err.unwrap_or(LiftError::NoVisibleKeypoints));
    };

    let proto = &protos[best.proto];
    let keypoints = best
        .pooled
        .iter()
        .filter_map(|c| {
            let k = proto.keypoints.get(&c.name)?;
            let reprojection = project(&best.fit.pose, k).ok()?;
            Some(LiftedKeypoint { name: c.name.clone(), observed: c.position, score: c.score, reprojection })
        })
        .collect();
    Ok(LiftResult {
        image_id: det.image_id.clone(),
        detection_id: det.id.clone(),
        class: det.class.clone(),
        bbox: det.bbox,
        score: det.score,
        prototype_id: proto.id.clone(),
        prototype_index: best.proto,
        pose: best.fit.pose,
        residual: best.fit.residual,
        converged: best.fit.converged,
        component_id: best.component,
        azimuth_estimate: input.azimuth_estimate,
        keypoints,
    })
}

/// Lifts every input independently; results keep the input order.
pub fn lift_batch(inputs: &[LiftInput], ctx: &LiftContext, exec: Execution) -> Vec<Result<LiftResult, LiftError>> {
    exec.map(inputs, |input| lift(input, ctx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::{KeypointStats, SpatialComponent};

    fn car() -> Prototype {
        Prototype::cuboid("car", "c0", [4.0, 1.8, 1.4])
    }

    fn pose(a: f64, e: f64, t: f64, d: f64) -> CameraPose {
        CameraPose::new(a, e, t, d, Point2::new(320.0, 240.0), DEFAULT_FOCAL).unwrap()
    }

    fn observe(proto: &Prototype, p: &CameraPose) -> Vec<Correspondence> {
        proto.keypoints.iter().map(|(n, k)| Correspondence::new(n, project(p, k).unwrap())).collect()
    }

    fn bounds(d: f64) -> PoseBounds {
        PoseBounds::new(d, 640.0, 480.0, DEFAULT_THETA_LIMIT)
    }

    #[test]
    fn true_pose_is_a_fixed_point() {
        let proto = car();
        let p0 = pose(30.0, 15.0, 3.0, 40.0);
        let corrs = observe(&proto, &p0);
        let fit = fit_pose(&proto, &corrs, &p0, &bounds(40.0), &SolverOptions::default()).unwrap();
        assert!(fit.residual < 1e-8);
        assert!(fit.converged);
        assert!((fit.pose.azimuth() - 30.0).abs() < 1e-9);
    }

    #[test]
    fn recovers_from_perturbed_start() {
        let proto = car();
        let p0 = pose(30.0, 15.0, 3.0, 40.0);
        let corrs = observe(&proto, &p0);
        let init = pose(40.0, 20.0, 3.0, 44.0);
        let fit = fit_pose(&proto, &corrs, &init, &bounds(40.0), &SolverOptions::default()).unwrap();
        assert!(crate::geometry::azimuth_error(fit.pose.azimuth(), 30.0) < 0.5);
        assert!(fit.objective <= fit.initial_objective);
    }

    #[test]
    fn huber_norm_also_recovers() {
        let proto = car();
        let p0 = pose(200.0, 10.0, -5.0, 35.0);
        let corrs = observe(&proto, &p0);
        let init = pose(210.0, 15.0, 0.0, 38.0);
        let opts = SolverOptions { norm: RobustNorm::L1Smooth, ..Default::default() };
        let fit = fit_pose(&proto, &corrs, &init, &bounds(35.0), &opts).unwrap();
        assert!(crate::geometry::azimuth_error(fit.pose.azimuth(), 200.0) < 0.5);
    }

    #[test]
    fn needs_three_correspondences() {
        let proto = car();
        let p0 = pose(30.0, 15.0, 0.0, 40.0);
        let corrs = observe(&proto, &p0);
        let err = fit_pose(&proto, &corrs[..2], &p0, &bounds(40.0), &SolverOptions::default()).unwrap_err();
        assert_eq!(err, LiftError::TooFewCorrespondences(2));
        let foreign: Vec<_> = (0..4).map(|i| Correspondence::new(&format!("x{i}"), Point2::new(1.0, 1.0))).collect();
        let err = fit_pose(&proto, &foreign, &p0, &bounds(40.0), &SolverOptions::default()).unwrap_err();
        assert_eq!(err, LiftError::NoVisibleKeypoints);
    }

    #[test]
    fn init_uses_estimate_and_prior() {
        let proto = car();
        let corrs = observe(&proto, &pose(85.0, 12.0, 0.0, 40.0));
        let priors = ClassPriors { elevation: 10.0, distance: 40.0 };
        let p = init_pose(90.0, &priors, &proto, &corrs, &bounds(40.0), DEFAULT_FOCAL, &SolverOptions::default())
            .unwrap();
        assert_eq!(p.azimuth(), 90.0);
        assert_eq!(p.elevation(), 10.0);
        assert_eq!(p.theta(), 0.0);
    }

    #[test]
    fn init_centers_translation_on_symmetric_shape() {
        let cube = Prototype::cuboid("box", "b", [2.0, 2.0, 2.0]);
        let mut p0 = pose(0.0, 0.0, 0.0, 30.0);
        p0.set_translation(Point2::new(200.0, 150.0));
        // keep only the corners: their centroid projects to the box center
        let corrs: Vec<_> =
            observe(&cube, &p0).into_iter().filter(|c| c.name.ends_with("top") || c.name.ends_with("bottom")).collect();
        let priors = ClassPriors { elevation: 0.0, distance: 25.0 };
        let p = init_pose(0.0, &priors, &cube, &corrs, &bounds(25.0), DEFAULT_FOCAL, &SolverOptions::default())
            .unwrap();
        assert!((p.translation().x - 200.0).abs() < 5.0);
        assert!((p.translation().y - 150.0).abs() < 5.0);
    }

    #[test]
    fn init_distance_near_truth() {
        let proto = car();
        let corrs = observe(&proto, &pose(40.0, 20.0, 0.0, 8.0));
        let priors = ClassPriors { elevation: 15.0, distance: 12.0 };
        let p = init_pose(35.0, &priors, &proto, &corrs, &bounds(12.0), DEFAULT_FOCAL, &SolverOptions::default())
            .unwrap();
        assert!((6.4..=9.6).contains(&p.distance()), "{}", p.distance());
    }

    #[test]
    fn start_behind_camera_is_pushed_back() {
        let proto = car();
        let p0 = pose(30.0, 15.0, 0.0, 40.0);
        let corrs = observe(&proto, &p0);
        let b = PoseBounds { distance: [0.5, 400.0], ..bounds(40.0) };
        let init = pose(30.0, 15.0, 0.0, 1.0);
        let fit = fit_pose(&proto, &corrs, &init, &b, &SolverOptions::default()).unwrap();
        assert!(fit.pose.distance() > 2.0);
        let tight = PoseBounds { distance: [0.5, 1.0], ..bounds(40.0) };
        assert_eq!(fit_pose(&proto, &corrs, &init, &tight, &SolverOptions::default()), Err(LiftError::DivergedBehindCamera));
    }

    fn wide_model(class: &str, centers: &[f64], names: &[String]) -> SpatialModelFile {
        let stats = KeypointStats { mean: [0.0; 2], std: [1.0; 2], extent: [1.0; 2], visibility: 1.0 };
        let components = centers
            .iter()
            .enumerate()
            .map(|(id, &c)| SpatialComponent {
                id,
                azimuth_center: c,
                instances: 1,
                keypoints: names.iter().map(|n| (n.clone(), stats.clone())).collect(),
            })
            .collect();
        SpatialModelFile::new(
            vec![SpatialModel { class: class.into(), kappa: 2.0, extent_floor: 0.05, components }],
            serde_json::Value::Null,
        )
    }

    fn scene(proto: &Prototype, p: &CameraPose) -> (Detection, Vec<KeypointCandidate>) {
        let pts: Vec<Point2> = proto.vertices.iter().map(|v| project(p, v).unwrap()).collect();
        let bbox = BBox::enclosing(&pts).unwrap();
        let det = Detection { image_id: "0".into(), class: proto.class.clone(), bbox, score: 1.0, id: None, azimuth: None };
        let cands = proto
            .keypoints
            .iter()
            .map(|(n, k)| KeypointCandidate { name: n.clone(), position: project(p, k).unwrap(), score: 1.0 })
            .collect();
        (det, cands)
    }

    fn registry() -> PrototypeRegistry {
        let mut r = PrototypeRegistry::new();
        for (i, e) in [[4.0, 1.8, 1.4], [3.0, 2.0, 2.0], [2.0, 1.0, 1.5]].into_iter().enumerate() {
            r.insert(Prototype::cuboid("car", &format!("c{i}"), e)).unwrap();
        }
        r
    }

    #[test]
    fn selects_generating_prototype() {
        let reg = registry();
        let gen = &reg.class("car")[2];
        let p0 = pose(120.0, 20.0, 2.0, 40.0);
        let (det, cands) = scene(gen, &p0);
        let spatial = wide_model("car", &[0.0, 90.0, 180.0, 270.0], &reg.vocabulary("car"));
        let priors = BTreeMap::from([("car".to_string(), ClassPriors { elevation: 15.0, distance: 38.0 })]);
        let opts = LiftOptions::default();
        let ctx = LiftContext { registry: &reg, spatial: &spatial, priors: &priors, options: &opts };
        let input = LiftInput { detection: &det, candidates: &cands, image_size: (640.0, 480.0), azimuth_estimate: Some(125.0) };
        let res = lift(&input, &ctx).unwrap();
        assert_eq!(res.prototype_index, 2);
        assert!(res.residual < 1e-6, "{}", res.residual);
        assert_eq!(res.component_id, 1);
        for k in &res.keypoints {
            let again = project(&res.pose, &gen.keypoints[&k.name]).unwrap();
            assert_eq!(again, k.reprojection);
        }

        // the chosen prototype attains the minimum over per-prototype fits
        let corrs: Vec<_> = cands.iter().map(|c| Correspondence::new(&c.name, c.position)).collect();
        let b = PoseBounds::new(38.0, 640.0, 480.0, DEFAULT_THETA_LIMIT);
        for proto in reg.class("car") {
            let f = fit_with_restarts(proto, &corrs, 125.0, &priors["car"], &b, &opts).unwrap();
            assert!(res.residual <= f.residual);
        }
    }

    #[test]
    fn strategies_coincide_with_one_component() {
        let reg = registry();
        let p0 = pose(300.0, 25.0, -4.0, 45.0);
        let (det, cands) = scene(&reg.class("car")[0], &p0);
        let spatial = wide_model("car", &[0.0], &reg.vocabulary("car"));
        let priors = BTreeMap::from([("car".to_string(), ClassPriors { elevation: 15.0, distance: 38.0 })]);
        let guided = LiftOptions::default();
        let best = LiftOptions { strategy: Strategy::BestObjective, ..Default::default() };
        let input = LiftInput { detection: &det, candidates: &cands, image_size: (640.0, 480.0), azimuth_estimate: Some(290.0) };
        let a = lift(&input, &LiftContext { registry: &reg, spatial: &spatial, priors: &priors, options: &guided }).unwrap();
        let b = lift(&input, &LiftContext { registry: &reg, spatial: &spatial, priors: &priors, options: &best }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lift_errors() {
        let reg = registry();
        let (det, cands) = scene(&reg.class("car")[0], &pose(10.0, 10.0, 0.0, 40.0));
        let spatial = wide_model("car", &[0.0], &reg.vocabulary("car"));
        let priors = BTreeMap::from([("car".to_string(), ClassPriors { elevation: 15.0, distance: 38.0 })]);
        let opts = LiftOptions::default();
        let ctx = LiftContext { registry: &reg, spatial: &spatial, priors: &priors, options: &opts };

        let input = LiftInput { detection: &det, candidates: &cands, image_size: (640.0, 480.0), azimuth_estimate: None };
        assert_eq!(lift(&input, &ctx), Err(LiftError::MissingViewpoint));

        let far: Vec<_> = cands
            .iter()
            .map(|c| KeypointCandidate { position: Point2::new(-5000.0, -5000.0), ..c.clone() })
            .collect();
        let input = LiftInput { azimuth_estimate: Some(10.0), candidates: &far, ..input };
        assert_eq!(lift(&input, &ctx), Err(LiftError::NoVisibleKeypoints));

        let other = Detection { class: "bus".into(), ..det.clone() };
        let input = LiftInput { detection: &other, ..input };
        assert_eq!(lift(&input, &ctx), Err(LiftError::NoProtoForClass("bus".into())));
    }

    #[test]
    fn batch_matches_sequential_calls() {
        let reg = registry();
        let spatial = wide_model("car", &[0.0, 180.0], &reg.vocabulary("car"));
        let priors = BTreeMap::from([("car".to_string(), ClassPriors { elevation: 15.0, distance: 38.0 })]);
        let opts = LiftOptions::default();
        let ctx = LiftContext { registry: &reg, spatial: &spatial, priors: &priors, options: &opts };
        let scenes: Vec<_> = (0..6).map(|i| scene(&reg.class("car")[i % 3], &pose(60.0 * i as f64, 15.0, 0.0, 40.0))).collect();
        let inputs: Vec<_> = scenes
            .iter()
            .enumerate()
            .map(|(i, (d, c))| LiftInput {
                detection: d,
                candidates: c,
                image_size: (640.0, 480.0),
                azimuth_estimate: Some(60.0 * i as f64),
            })
            .collect();
        let seq = lift_batch(&inputs, &ctx, Execution::Sequential);
        let par = lift_batch(&inputs, &ctx, Execution::Parallel);
        assert_eq!(seq, par);
        assert!(seq.iter().all(|r| r.as_ref().unwrap().residual < 1e-6));
    }
}
