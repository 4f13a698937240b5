//! Box-constrained Levenberg-Marquardt over the six camera parameters.
//!
//! Parameters are `[azimuth, elevation, theta]` in radians, then distance,
//! `tx`, `ty`. Every trial point is projected onto the bounds before it is
//! evaluated, and a step is only accepted if it lowers the cost, so the
//! returned cost never exceeds the starting cost.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::geometry::{project_with_jacobian, CameraPose, Point2, Point3};

/// Transition point of the Huber loss, in pixels.
pub const HUBER_DELTA: f64 = 5.0;

pub const N_PARAMS: usize = 6;
pub type Params = [f64; N_PARAMS];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RobustNorm {
    /// Sum of squared pixel distances.
    #[default]
    L2,
    /// Huber approximation of the sum of unsquared distances.
    L1Smooth,
}

impl std::str::FromStr for RobustNorm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l2" => Ok(Self::L2),
            "l1-smooth" => Ok(Self::L1Smooth),
            other => Err(format!("unknown norm {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub norm: RobustNorm,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { norm: RobustNorm::L2, grad_tol: 1e-8, step_tol: 1e-10, max_iter: 200 }
    }
}

/// Lower/upper limits per parameter, in solver units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lower: Params,
    pub upper: Params,
}

impl Bounds {
    pub fn clamp(&self, q: &Params) -> Params {
        let mut out = *q;
        for k in 0..N_PARAMS {
            out[k] = out[k].clamp(self.lower[k], self.upper[k]);
        }
        out
    }
}

/// Observed point, its model point and a non-negative weight.
pub struct Residual<'a> {
    pub observed: Point2,
    pub model: &'a Point3,
    pub weight: f64,
}

pub struct Problem<'a> {
    pub residuals: Vec<Residual<'a>>,
    pub focal: f64,
    pub norm: RobustNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub params: Params,
    pub cost: f64,
    pub initial_cost: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub fn pose_from_params(q: &Params, focal: f64) -> Option<CameraPose> {
    CameraPose::new(
        q[0].to_degrees(),
        q[1].to_degrees(),
        q[2].to_degrees(),
        q[3],
        Point2::new(q[4], q[5]),
        focal,
    )
    .ok()
}

pub fn params_from_pose(p: &CameraPose) -> Params {
    let t = p.translation();
    [
        p.azimuth().to_radians(),
        p.elevation().to_radians(),
        p.theta().to_radians(),
        p.distance(),
        t.x,
        t.y,
    ]
}

fn loss(norm: RobustNorm, dist: f64) -> f64 {
    match norm {
        RobustNorm::L2 => 0.5 * dist * dist,
        RobustNorm::L1Smooth if dist <= HUBER_DELTA => 0.5 * dist * dist,
        RobustNorm::L1Smooth => HUBER_DELTA * (dist - 0.5 * HUBER_DELTA),
    }
}

/// IRLS weight such that `weight * J^T r` is the loss gradient.
fn loss_weight(norm: RobustNorm, dist: f64) -> f64 {
    match norm {
        RobustNorm::L1Smooth if dist > HUBER_DELTA => HUBER_DELTA / dist,
        _ => 1.0,
    }
}

struct Linearization {
    cost: f64,
    gradient: DVector<f64>,
    hessian: DMatrix<f64>,
}

impl Problem<'_> {
    /// Cost at `q`; `None` if any model point is behind the camera.
    pub fn cost(&self, q: &Params) -> Option<f64> {
        let pose = pose_from_params(q, self.focal)?;
        let rot = crate::geometry::rotation_from_pose(&pose);
        let mut total = 0.0;
        for r in &self.residuals {
            let uv = crate::geometry::project_with(&rot, &pose, r.model).ok()?;
            total += r.weight * loss(self.norm, uv.distance(&r.observed));
        }
        Some(total)
    }

    fn linearize(&self, q: &Params, free: &[usize]) -> Option<Linearization> {
        let pose = pose_from_params(q, self.focal)?;
        let m = free.len();
        let mut gradient = DVector::zeros(m);
        let mut hessian = DMatrix::zeros(m, m);
        let mut cost = 0.0;
        for r in &self.residuals {
            let (uv, jac) = project_with_jacobian(&pose, r.model).ok()?;
            let res = [uv.x - r.observed.x, uv.y - r.observed.y];
            let dist = res[0].hypot(res[1]);
            cost += r.weight * loss(self.norm, dist);
            let w = r.weight * loss_weight(self.norm, dist);
            for (a, &pa) in free.iter().enumerate() {
                gradient[a] += w * (jac[0][pa] * res[0] + jac[1][pa] * res[1]);
                for (b, &pb) in free.iter().enumerate().skip(a) {
                    let h = w * (jac[0][pa] * jac[0][pb] + jac[1][pa] * jac[1][pb]);
                    hessian[(a, b)] += h;
                    if a != b {
                        hessian[(b, a)] += h;
                    }
                }
            }
        }
        Some(Linearization { cost, gradient, hessian })
    }

    /// Minimizes over the parameters flagged in `free`, starting at `start`
    /// (which must be feasible and inside `bounds`).
    pub fn solve(&self, start: &Params, free: &[bool; N_PARAMS], bounds: &Bounds, opts: &SolverOptions) -> Option<Solution> {
        let idx: Vec<usize> = (0..N_PARAMS).filter(|&k| free[k]).collect();
        let mut q = bounds.clamp(start);
        let mut lin = self.linearize(&q, &idx)?;
        let initial_cost = lin.cost;
        let mut mu = -1.0;
        let mut nu = 2.0;
        let mut converged = false;
        let mut iterations = 0;

        while iterations < opts.max_iter {
            iterations += 1;
            let gmax = lin.gradient.amax();
            if gmax <= opts.grad_tol * (1.0 + lin.cost) {
                converged = true;
                break;
            }
            let diag: Vec<f64> = {
                let dmax = (0..idx.len()).map(|k| lin.hessian[(k, k)]).fold(0.0, f64::max).max(1e-300);
                (0..idx.len()).map(|k| lin.hessian[(k, k)].max(1e-12 * dmax)).collect()
            };
            if mu < 0.0 {
                mu = 1e-3;
            }
            let mut damped = lin.hessian.clone();
            for (k, d) in diag.iter().enumerate() {
                damped[(k, k)] += mu * d;
            }
            let Some(chol) = damped.cholesky() else {
                mu *= nu;
                nu *= 2.0;
                if mu > 1e20 {
                    break;
                }
                continue;
            };
            let delta = chol.solve(&(-&lin.gradient));
            let mut trial = q;
            for (k, &p) in idx.iter().enumerate() {
                trial[p] += delta[k];
            }
            let trial = bounds.clamp(&trial);
            let step = DVector::from_iterator(idx.len(), idx.iter().map(|&p| trial[p] - q[p]));
            let qnorm = idx.iter().map(|&p| q[p] * q[p]).sum::<f64>().sqrt();
            if step.norm() <= opts.step_tol * (qnorm + opts.step_tol) {
                converged = true;
                break;
            }
            let trial_cost = self.cost(&trial);
            match trial_cost {
                Some(c) if c < lin.cost => {
                    let predicted = -(lin.gradient.dot(&step) + 0.5 * step.dot(&(&lin.hessian * &step)));
                    let rho = if predicted > 0.0 { (lin.cost - c) / predicted } else { 0.5 };
                    let Some(next) = self.linearize(&trial, &idx) else { break };
                    q = trial;
                    lin = next;
                    mu *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
                    nu = 2.0;
                }
                _ => {
                    mu *= nu;
                    nu *= 2.0;
                    if mu > 1e20 {
                        break;
                    }
                }
            }
        }
        Some(Solution { params: q, cost: lin.cost, initial_cost, converged, iterations })
    }
}
