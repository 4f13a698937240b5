//! Run configuration echoed next to every output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::lifting::{RobustNorm, Strategy};
use crate::metrics::ApMode;
use crate::regression::{Penalty, UnwrapMode};

pub const RUN_CONFIG_FORMAT: &str = "lift3d-run/1";

/// Every setting a pipeline stage may depend on. Stages fill in what they
/// use and leave the rest at defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub format: String,
    pub command: String,
    pub version: String,
    pub focal: f64,
    pub kappa: f64,
    pub extent_floor: f64,
    pub components: usize,
    pub penalty: Penalty,
    pub lambda: f64,
    pub l1_ratio: f64,
    pub unwrap_mode: UnwrapMode,
    pub strategy: Strategy,
    pub robust: RobustNorm,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    pub ap_mode: ApMode,
    pub seed: Option<u64>,
    pub paths: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(command: &str) -> Self {
        let solver = crate::lifting::SolverOptions::default();
        Self {
            format: RUN_CONFIG_FORMAT.into(),
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            focal: crate::geometry::DEFAULT_FOCAL,
            kappa: crate::spatial::DEFAULT_KAPPA,
            extent_floor: crate::spatial::DEFAULT_EXTENT_FLOOR,
            components: 8,
            penalty: Penalty::Ridge,
            lambda: 1.0,
            l1_ratio: 0.5,
            unwrap_mode: UnwrapMode::Raw,
            strategy: Strategy::Guided,
            robust: solver.norm,
            grad_tol: solver.grad_tol,
            step_tol: solver.step_tol,
            max_iter: solver.max_iter,
            ap_mode: ApMode::AllPoints,
            seed: None,
            paths: BTreeMap::new(),
        }
    }

    pub fn path(mut self, key: &str, value: impl AsRef<std::path::Path>) -> Self {
        self.paths.insert(key.into(), value.as_ref().display().to_string());
        self
    }

    /// Checks documented ranges.
    pub fn validate(&self) -> Result<(), String> {
        let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(what.to_string()) };
        check(self.focal > 0.0 && self.focal.is_finite(), "focal must be > 0")?;
        check(self.kappa > 0.0 && self.kappa.is_finite(), "kappa must be > 0")?;
        check(self.extent_floor >= 0.0, "extent floor must be >= 0")?;
        check(self.components >= 1, "components must be >= 1")?;
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be >= 0")?;
        check((0.0..=1.0).contains(&self.l1_ratio), "l1_ratio must be in [0, 1]")?;
        check(self.grad_tol > 0.0 && self.step_tol > 0.0, "tolerances must be > 0")?;
        check(self.max_iter > 0, "max_iter must be > 0")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_validation() {
        let c = RunConfig::new("lift").path("out", "x/y.jsonl");
        let back: RunConfig = serde_json::from_value(c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(c.validate().is_ok());
        let bad = RunConfig { l1_ratio: 1.5, ..c };
        assert!(bad.validate().is_err());
    }
}
