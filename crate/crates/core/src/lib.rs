//! Lifting 2D object detections with keypoint evidence to 3D prototype and
//! pose hypotheses, and evaluating joint localization/viewpoint metrics.
//!
//! Pipeline stages:
//!
//! 1. [`regression`]: continuous azimuth regression from detection features.
//! 2. [`spatial`]: per-viewpoint keypoint search regions and max-pooling.
//! 3. [`lifting`]: exhaustive prototype search with bounded pose fitting.
//! 4. [`metrics`]: AP, AVP, AAVP, APP and segmentation accuracy.
//!
//! [`geometry`] holds the camera model, [`prototypes`] the shape registry
//! and rasterizer, [`dataset`], [`features`] and [`synth`] the file formats
//! and synthetic scene generator.

pub mod config;
pub mod dataset;
pub mod exec;
pub mod features;
pub mod geometry;
pub mod lifting;
pub mod metrics;
pub mod prototypes;
pub mod regression;
pub mod spatial;
pub mod synth;

pub use exec::Execution;
pub use geometry::{project, BBox, CameraPose, Point2, Point3};
pub use lifting::{lift, lift_batch, ClassPriors, LiftContext, LiftInput, LiftOptions, LiftResult, Strategy};
pub use prototypes::{Prototype, PrototypeRegistry};
pub use regression::{Regressor, TrainConfig};
pub use spatial::{SpatialModel, SpatialModelFile};
