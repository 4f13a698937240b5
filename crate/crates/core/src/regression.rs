//! Continuous azimuth regression from precomputed feature vectors.
//!
//! Objective (on standardized features, intercept unpenalized):
//!
//! * ridge: `||y - Xw||^2 + lambda * ||w||_2^2`, closed form
//! * lasso: `||y - Xw||^2 + lambda * ||w||_1`, cyclic coordinate descent
//! * elastic net: `||y - Xw||^2 + lambda * (alpha * ||w||_1 + (1 - alpha) * ||w||_2^2)`
//!
//! so that `alpha = 0` reproduces ridge and `alpha = 1` reproduces lasso with
//! the same `lambda`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{azimuth_error, normalize_azimuth, normalize_signed};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressionError {
    #[error("singular normal equations (rank-deficient design with lambda = 0)")]
    SingularSystem,
    #[error("coordinate descent did not converge in {iterations} sweeps (KKT violation {violation:e})")]
    NonConvergence { iterations: usize, violation: f64 },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid training set: {0}")]
    InvalidData(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Penalty {
    Ridge,
    Lasso,
    ElasticNet,
}

impl std::str::FromStr for Penalty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ridge" => Ok(Self::Ridge),
            "lasso" => Ok(Self::Lasso),
            "elastic-net" | "elnet" => Ok(Self::ElasticNet),
            other => Err(format!("unknown penalty {other:?}")),
        }
    }
}

/// How targets are presented to the regressor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnwrapMode {
    /// Raw degrees in `[0, 360)`.
    #[default]
    Raw,
    /// Targets shifted to `[-180, 180)` around their circular mean; the mean
    /// is added back at prediction time.
    Recenter,
}

impl std::str::FromStr for UnwrapMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Self::Raw),
            "recenter" => Ok(Self::Recenter),
            other => Err(format!("unknown unwrap mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub penalty: Penalty,
    pub lambda: f64,
    pub l1_ratio: f64,
    pub fit_intercept: bool,
    pub standardize: bool,
    pub unwrap_mode: UnwrapMode,
    /// KKT tolerance for coordinate descent.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            penalty: Penalty::Ridge,
            lambda: 1.0,
            l1_ratio: 0.5,
            fit_intercept: true,
            standardize: true,
            unwrap_mode: UnwrapMode::Raw,
            tol: 1e-8,
            max_iter: 100_000,
        }
    }
}

impl TrainConfig {
    pub fn new(penalty: Penalty, lambda: f64) -> Self {
        Self { penalty, lambda, ..Self::default() }
    }

    fn alpha(&self) -> f64 {
        match self.penalty {
            Penalty::Ridge => 0.0,
            Penalty::Lasso => 1.0,
            Penalty::ElasticNet => self.l1_ratio,
        }
    }
}

/// Rows of features with azimuth targets in degrees.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl TrainingSet {
    pub fn new(features: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self, RegressionError> {
        let set = Self { features, targets };
        set.validate()?;
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn validate(&self) -> Result<(), RegressionError> {
        let bad = |m: &str| Err(RegressionError::InvalidData(m.into()));
        if self.targets.is_empty() {
            return bad("empty training set");
        }
        if self.features.len() != self.targets.len() {
            return bad("feature/target count mismatch");
        }
        let d = self.dim();
        if d == 0 {
            return bad("zero-dimensional features");
        }
        if let Some(row) = self.features.iter().find(|r| r.len() != d) {
            return Err(RegressionError::DimensionMismatch { expected: d, got: row.len() });
        }
        if !self.features.iter().flatten().all(|v| v.is_finite()) {
            return bad("non-finite feature value");
        }
        if !self.targets.iter().all(|t| t.is_finite() && (0.0..360.0).contains(t)) {
            return bad("targets must lie in [0, 360)");
        }
        Ok(())
    }

    fn subset(&self, rows: &[usize]) -> TrainingSet {
        TrainingSet {
            features: rows.iter().map(|&i| self.features[i].clone()).collect(),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

/// Per-dimension affine map applied before the linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    fn fit(x: &[Vec<f64>], center: bool, scale: bool) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut out = Self::identity(d);
        for j in 0..d {
            let mean = x.iter().map(|r| r[j]).sum::<f64>() / n;
            if center {
                out.mean[j] = mean;
            }
            if scale {
                let var = x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                // constant columns keep unit scale
                out.std[j] = if sd > 1e-12 { sd } else { 1.0 };
            }
        }
        out
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub penalty: Penalty,
    pub lambda: f64,
    pub l1_ratio: f64,
    pub dim: usize,
    /// Weights on standardized features.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub standardization: Standardization,
    #[serde(default)]
    pub class: Option<String>,
    /// Circular mean removed from targets in recenter mode, else 0.
    #[serde(default)]
    pub target_offset: f64,
}

impl Regressor {
    /// Linear output before angle normalization.
    pub fn predict_raw(&self, features: &[f64]) -> Result<f64, RegressionError> {
        if features.len() != self.dim {
            return Err(RegressionError::DimensionMismatch { expected: self.dim, got: features.len() });
        }
        let z = self.standardization.apply(features);
        Ok(z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.intercept + self.target_offset)
    }

    /// Predicted azimuth in `[0, 360)`.
    pub fn predict(&self, features: &[f64]) -> Result<f64, RegressionError> {
        self.predict_raw(features).map(normalize_azimuth)
    }
}

/// Circular mean in degrees; 0 when the resultant vanishes.
pub fn circular_mean(angles: &[f64]) -> f64 {
    let (s, c) = angles.iter().fold((0.0, 0.0), |(s, c), a| {
        let r = a.to_radians();
        (s + r.sin(), c + r.cos())
    });
    if s.hypot(c) < 1e-12 {
        0.0
    } else {
        normalize_azimuth(s.atan2(c).to_degrees())
    }
}

/// Standardized design, centered targets and the bookkeeping to undo both.
pub struct Prepared {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub y_mean: f64,
    pub offset: f64,
    pub standardization: Standardization,
}

pub fn prepare(data: &TrainingSet, cfg: &TrainConfig) -> Result<Prepared, RegressionError> {
    data.validate()?;
    let standardization = Standardization::fit(&data.features, cfg.fit_intercept, cfg.standardize);
    let (n, d) = (data.len(), data.dim());
    let x = DMatrix::from_fn(n, d, |i, j| {
        (data.features[i][j] - standardization.mean[j]) / standardization.std[j]
    });
    let offset = match cfg.unwrap_mode {
        UnwrapMode::Raw => 0.0,
        UnwrapMode::Recenter => circular_mean(&data.targets),
    };
    let targets: Vec<f64> = data
        .targets
        .iter()
        .map(|&t| match cfg.unwrap_mode {
            UnwrapMode::Raw => t,
            UnwrapMode::Recenter => normalize_signed(t - offset),
        })
        .collect();
    let y_mean = if cfg.fit_intercept { targets.iter().sum::<f64>() / n as f64 } else { 0.0 };
    let y = DVector::from_iterator(n, targets.iter().map(|t| t - y_mean));
    Ok(Prepared { x, y, y_mean, offset, standardization })
}

pub fn train(data: &TrainingSet, cfg: &TrainConfig) -> Result<Regressor, RegressionError> {
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(RegressionError::InvalidConfig(format!("lambda {} must be >= 0", cfg.lambda)));
    }
    if !(0.0..=1.0).contains(&cfg.l1_ratio) {
        return Err(RegressionError::InvalidConfig(format!("l1_ratio {} outside [0, 1]", cfg.l1_ratio)));
    }
    let prep = prepare(data, cfg)?;
    let w = match cfg.penalty {
        Penalty::Ridge => solve_ridge(&prep.x, &prep.y, cfg.lambda)?,
        Penalty::Lasso | Penalty::ElasticNet => {
            coordinate_descent(&prep.x, &prep.y, cfg.lambda, cfg.alpha(), cfg.tol, cfg.max_iter)?
        }
    };
    Ok(Regressor {
        penalty: cfg.penalty,
        lambda: cfg.lambda,
        l1_ratio: cfg.alpha(),
        dim: data.dim(),
        weights: w.iter().copied().collect(),
        intercept: prep.y_mean,
        standardization: prep.standardization,
        class: None,
        target_offset: prep.offset,
    })
}

/// `(X^T X + lambda I) w = X^T y`.
pub fn solve_ridge(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>, RegressionError> {
    let d = x.ncols();
    let gram = x.transpose() * x;
    if lambda == 0.0 {
        let sv = gram.clone().singular_values();
        let max = sv.max();
        if x.nrows() < d || max == 0.0 || sv.min() <= 1e-12 * max {
            return Err(RegressionError::SingularSystem);
        }
    }
    let a = gram + DMatrix::identity(d, d) * lambda;
    let rhs = x.transpose() * y;
    a.cholesky().map(|c| c.solve(&rhs)).ok_or(RegressionError::SingularSystem)
}

/// Largest violation of the optimality conditions of the penalized objective.
pub fn kkt_violation(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, lambda: f64, alpha: f64) -> f64 {
    let grad = -2.0 * x.transpose() * (y - x * w);
    let l1 = lambda * alpha;
    let l2 = 2.0 * lambda * (1.0 - alpha);
    (0..w.len())
        .map(|j| {
            let g = grad[j] + l2 * w[j];
            if w[j] != 0.0 {
                (g + l1 * w[j].signum()).abs()
            } else {
                (g.abs() - l1).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent for the lasso / elastic-net objective.
pub fn coordinate_descent(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>, RegressionError> {
    let d = x.ncols();
    let col_sq: Vec<f64> = (0..d).map(|j| x.column(j).norm_squared()).collect();
    let mut w: DVector<f64> = DVector::zeros(d);
    let mut resid = y.clone();
    let l1_half = lambda * alpha / 2.0;
    let l2 = lambda * (1.0 - alpha);
    let mut violation = f64::INFINITY;
    for sweep in 0..max_iter {
        for j in 0..d {
            let denom = col_sq[j] + l2;
            if denom == 0.0 {
                continue;
            }
            let col = x.column(j);
            let rho = col.dot(&resid) + col_sq[j] * w[j];
            let new = soft_threshold(rho, l1_half) / denom;
            let delta = new - w[j];
            if delta != 0.0 {
                resid.axpy(-delta, &col, 1.0);
                w[j] = new;
            }
        }
        violation = kkt_violation(x, y, &w, lambda, alpha);
        if violation <= tol {
            log::debug!("coordinate descent converged after {} sweeps", sweep + 1);
            return Ok(w);
        }
    }
    Err(RegressionError::NonConvergence { iterations: max_iter, violation })
}

/// Picks lambda from `grid` by k-fold cross-validation on mean azimuth error.
/// Folds are assigned round-robin by row index. Returns the chosen lambda and
/// the per-lambda scores.
pub fn select_lambda(
    data: &TrainingSet,
    cfg: &TrainConfig,
    grid: &[f64],
    folds: usize,
) -> Result<(f64, Vec<f64>), RegressionError> {
    if grid.is_empty() || folds < 2 || folds > data.len() {
        return Err(RegressionError::InvalidConfig(format!(
            "need a nonempty grid and 2 <= folds <= {}",
            data.len()
        )));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cfg = TrainConfig { lambda, ..cfg.clone() };
        let mut total = 0.0;
        for k in 0..folds {
            let (test, train_rows): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|i| i % folds == k);
            let model = train(&data.subset(&train_rows), &cfg)?;
            for &i in &test {
                total += azimuth_error(model.predict(&data.features[i])?, data.targets[i]);
            }
        }
        scores.push(total / data.len() as f64);
    }
    let best = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| grid[i])
        .expect("grid nonempty");
    Ok((best, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raw_cfg(penalty: Penalty, lambda: f64) -> TrainConfig {
        TrainConfig { fit_intercept: false, standardize: false, ..TrainConfig::new(penalty, lambda) }
    }

    fn line() -> TrainingSet {
        TrainingSet::new(vec![vec![1.0], vec![2.0]], vec![2.0, 4.0]).unwrap()
    }

    #[test]
    fn ridge_exact_line() {
        let m = train(&line(), &raw_cfg(Penalty::Ridge, 0.0)).unwrap();
        assert!((m.weights[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_shrinks() {
        let m = train(&line(), &raw_cfg(Penalty::Ridge, 1.0)).unwrap();
        assert!((m.weights[0] - 10.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn lasso_huge_lambda_gives_intercept_only() {
        let data = TrainingSet::new(
            vec![vec![1.0, 0.5], vec![2.0, -1.0], vec![3.0, 0.0]],
            vec![10.0, 20.0, 40.0],
        )
        .unwrap();
        let m = train(&data, &TrainConfig::new(Penalty::Lasso, 1e9)).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0));
        assert!((m.predict(&[7.0, 7.0]).unwrap() - m.intercept).abs() < 1e-12);
        assert!((m.intercept - 70.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn singular_ridge_reported() {
        let data = TrainingSet::new(vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(train(&data, &raw_cfg(Penalty::Ridge, 0.0)), Err(RegressionError::SingularSystem));
        assert!(train(&data, &raw_cfg(Penalty::Ridge, 0.1)).is_ok());
    }

    #[test]
    fn non_convergence_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let data = TrainingSet::new(feats, (0..20).map(|i| i as f64 * 10.0).collect()).unwrap();
        let cfg = TrainConfig { max_iter: 1, ..TrainConfig::new(Penalty::Lasso, 0.01) };
        assert!(matches!(train(&data, &cfg), Err(RegressionError::NonConvergence { .. })));
    }

    #[test]
    fn predict_normalizes() {
        let m = Regressor {
            penalty: Penalty::Ridge,
            lambda: 0.0,
            l1_ratio: 0.0,
            dim: 1,
            weights: vec![2.0],
            intercept: 0.0,
            standardization: Standardization::identity(1),
            class: None,
            target_offset: 0.0,
        };
        assert_eq!(m.predict(&[1.5]).unwrap(), 3.0);
        assert_eq!(m.predict(&[182.5]).unwrap(), 5.0);
        assert_eq!(m.predict(&[-5.0]).unwrap(), 350.0);
        assert_eq!(m.predict(&[1.0, 2.0]), Err(RegressionError::DimensionMismatch { expected: 1, got: 2 }));
    }

    #[test]
    fn recenter_handles_wraparound() {
        // targets straddle 0/360 and depend linearly on the feature
        let feats: Vec<Vec<f64>> = (0..21).map(|i| vec![i as f64]).collect();
        let targets: Vec<f64> = (0..21).map(|i| normalize_azimuth(-20.0 + 2.0 * i as f64)).collect();
        let data = TrainingSet::new(feats, targets.clone()).unwrap();
        let raw = train(&data, &TrainConfig::new(Penalty::Ridge, 1e-9)).unwrap();
        let cfg = TrainConfig { unwrap_mode: UnwrapMode::Recenter, ..TrainConfig::new(Penalty::Ridge, 1e-9) };
        let rec = train(&data, &cfg).unwrap();
        let err = |m: &Regressor| {
            data.features.iter().zip(&targets).map(|(f, t)| azimuth_error(m.predict(f).unwrap(), *t)).fold(0.0, f64::max)
        };
        assert!(err(&rec) < 1e-6, "recenter error {}", err(&rec));
        assert!(err(&raw) > 10.0);
    }

    #[test]
    fn kfold_prefers_small_lambda_on_clean_data() {
        let feats: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
        let targets: Vec<f64> = (0..30).map(|i| 3.0 * i as f64 + 10.0).collect();
        let data = TrainingSet::new(feats, targets).unwrap();
        let (best, scores) = select_lambda(&data, &TrainConfig::new(Penalty::Ridge, 1.0), &[1e-6, 10.0, 1e4], 5).unwrap();
        assert_eq!(best, 1e-6);
        assert!(scores[0] < scores[2]);
    }

    #[test]
    fn training_set_validation() {
        assert!(TrainingSet::new(vec![], vec![]).is_err());
        assert!(TrainingSet::new(vec![vec![1.0]], vec![360.0]).is_err());
        assert!(matches!(
            TrainingSet::new(vec![vec![1.0], vec![1.0, 2.0]], vec![1.0, 2.0]),
            Err(RegressionError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn model_json_round_trip() {
        let m = train(&line(), &TrainConfig::new(Penalty::ElasticNet, 0.3)).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"penalty\":\"elastic-net\""));
        assert_eq!(serde_json::from_str::<Regressor>(&s).unwrap(), m);
    }
}
