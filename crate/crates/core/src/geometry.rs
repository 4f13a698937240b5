//! Object-centric pinhole camera, rotation construction and angle arithmetic.
//!
//! Convention (world Z up). At zero angles the camera sits on the -Y axis at
//! distance `D` and looks along +Y toward the origin; image `u` grows with
//! world +X and image `v` grows with world -Z (rows go down).
//!
//! * azimuth `a`: the camera orbits counterclockwise about world Z (seen from
//!   above), so at `a = 90` it sits on +X looking toward -X.
//! * elevation `e`: the camera rises above the ground plane.
//! * in-plane rotation `theta`: roll about the optical axis.
//!
//! The object-frame rotation is `R = R_roll(theta) * R_tilt(e) * R_pan(a)`
//! with `R_pan(a) = Rz(-a)`, `R_tilt(e) = Rx(e)`, `R_roll(theta) = Ry(theta)`.
//! A world point `X` maps to `p = R X`; camera coordinates are
//! `(p.x, -p.z, p.y + D)` and the pixel is
//! `u = f * x_cam / z_cam + tx`, `v = f * y_cam / z_cam + ty`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default focal length in pixels.
pub const DEFAULT_FOCAL: f64 = 3000.0;

/// Points with camera depth at or below this are rejected by [`project`].
pub const DEPTH_EPS: f64 = 1e-6;

/// Largest representable elevation; the valid range is `[-90, 90)`.
pub const MAX_ELEVATION: f64 = 89.999_999_999;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("invalid bounding box [{0}, {1}, {2}, {3}]")]
    InvalidBox(f64, f64, f64, f64),
    #[error("invalid camera pose: {0}")]
    InvalidPose(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        [p.x, p.y, p.z]
    }
}

/// Axis-aligned box in pixels, serialized as `[xmin, ymin, xmax, ymax]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self, GeometryError> {
        let finite = xmin.is_finite() && ymin.is_finite() && xmax.is_finite() && ymax.is_finite();
        if !finite || xmax <= xmin || ymax <= ymin {
            return Err(GeometryError::InvalidBox(xmin, ymin, xmax, ymax));
        }
        Ok(Self { xmin, ymin, xmax, ymax })
    }

    /// Box of the given size centered on `center`.
    pub fn centered(center: Point2, width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(
            center.x - width / 2.0,
            center.y - height / 2.0,
            center.x + width / 2.0,
            center.y + height / 2.0,
        )
    }

    /// Tightest box around a set of points; `None` if fewer than two distinct
    /// coordinates exist along either axis.
    pub fn enclosing<'a>(points: impl IntoIterator<Item = &'a Point2>) -> Option<Self> {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        Self::new(lo.x, lo.y, hi.x, hi.y).ok()
    }

    pub fn xmin(&self) -> f64 {
        self.xmin
    }
    pub fn ymin(&self) -> f64 {
        self.ymin
    }
    pub fn xmax(&self) -> f64 {
        self.xmax
    }
    pub fn ymax(&self) -> f64 {
        self.ymax
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point2 {
        Point2::new(0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    /// Inclusive containment test.
    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.xmin && p.x <= self.xmax && p.y >= self.ymin && p.y <= self.ymax
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            xmin: self.xmin + dx,
            ymin: self.ymin + dy,
            xmax: self.xmax + dx,
            ymax: self.ymax + dy,
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.xmin, b.ymin, b.xmax, b.ymax]
    }
}

/// Maps any angle in degrees to `[0, 360)`.
pub fn normalize_azimuth(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Maps any angle in degrees to `[-180, 180)`.
pub fn normalize_signed(deg: f64) -> f64 {
    normalize_azimuth(deg + 180.0) - 180.0
}

pub fn clamp_elevation(deg: f64) -> f64 {
    deg.clamp(-90.0, MAX_ELEVATION)
}

/// Absolute angular difference in `[0, 180]`.
pub fn azimuth_error(a1: f64, a2: f64) -> f64 {
    let d = normalize_azimuth(a1 - a2);
    d.min(360.0 - d)
}

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(b1: &BBox, b2: &BBox) -> f64 {
    let iw = b1.xmax.min(b2.xmax) - b1.xmin.max(b2.xmin);
    let ih = b1.ymax.min(b2.ymax) - b1.ymin.max(b2.ymin);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (b1.area() + b2.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPose", into = "RawPose")]
pub struct CameraPose {
    azimuth: f64,
    elevation: f64,
    theta: f64,
    distance: f64,
    translation: Point2,
    focal: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPose {
    azimuth: f64,
    elevation: f64,
    theta: f64,
    distance: f64,
    translation: Point2,
    focal: f64,
}

impl TryFrom<RawPose> for CameraPose {
    type Error = GeometryError;

    fn try_from(r: RawPose) -> Result<Self, Self::Error> {
        CameraPose::new(r.azimuth, r.elevation, r.theta, r.distance, r.translation, r.focal)
    }
}

impl From<CameraPose> for RawPose {
    fn from(p: CameraPose) -> Self {
        RawPose {
            azimuth: p.azimuth,
            elevation: p.elevation,
            theta: p.theta,
            distance: p.distance,
            translation: p.translation,
            focal: p.focal,
        }
    }
}

impl CameraPose {
    /// Builds a pose, normalizing the angles. Fails on non-finite values or a
    /// non-positive distance or focal length.
    pub fn new(
        azimuth: f64,
        elevation: f64,
        theta: f64,
        distance: f64,
        translation: Point2,
        focal: f64,
    ) -> Result<Self, GeometryError> {
        let all_finite = [azimuth, elevation, theta, distance, focal]
            .iter()
            .all(|v| v.is_finite())
            && translation.is_finite();
        if !all_finite {
            return Err(GeometryError::InvalidPose("non-finite parameter".into()));
        }
        if distance <= 0.0 {
            return Err(GeometryError::InvalidPose(format!("distance {distance} <= 0")));
        }
        if focal <= 0.0 {
            return Err(GeometryError::InvalidPose(format!("focal {focal} <= 0")));
        }
        Ok(Self {
            azimuth: normalize_azimuth(azimuth),
            elevation: clamp_elevation(elevation),
            theta: normalize_signed(theta),
            distance,
            translation,
            focal,
        })
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }
    pub fn elevation(&self) -> f64 {
        self.elevation
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn distance(&self) -> f64 {
        self.distance
    }
    pub fn translation(&self) -> Point2 {
        self.translation
    }
    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn set_azimuth(&mut self, deg: f64) {
        self.azimuth = normalize_azimuth(deg);
    }

    pub fn set_elevation(&mut self, deg: f64) {
        self.elevation = clamp_elevation(deg);
    }

    pub fn set_theta(&mut self, deg: f64) {
        self.theta = normalize_signed(deg);
    }

    pub fn set_distance(&mut self, d: f64) -> Result<(), GeometryError> {
        if !(d.is_finite() && d > 0.0) {
            return Err(GeometryError::InvalidPose(format!("distance {d} <= 0")));
        }
        self.distance = d;
        Ok(())
    }

    pub fn set_translation(&mut self, t: Point2) {
        self.translation = t;
    }

    /// Same camera seen at `scale` times the image resolution.
    pub fn rescaled(&self, scale: f64) -> Self {
        Self {
            focal: self.focal * scale,
            translation: Point2::new(self.translation.x * scale, self.translation.y * scale),
            ..*self
        }
    }

    /// Camera optical center in world coordinates.
    pub fn camera_center(&self) -> Point3 {
        let r = rotation_from_pose(self);
        Point3::from_vector(&(r.transpose() * Vector3::new(0.0, -self.distance, 0.0)))
    }
}

fn pan(a_rad: f64) -> Matrix3<f64> {
    let (s, c) = a_rad.sin_cos();
    Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0)
}

fn pan_derivative(a_rad: f64) -> Matrix3<f64> {
    let (s, c) = a_rad.sin_cos();
    Matrix3::new(-s, c, 0.0, -c, -s, 0.0, 0.0, 0.0, 0.0)
}

fn tilt(e_rad: f64) -> Matrix3<f64> {
    let (s, c) = e_rad.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn tilt_derivative(e_rad: f64) -> Matrix3<f64> {
    let (s, c) = e_rad.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn roll(t_rad: f64) -> Matrix3<f64> {
    let (s, c) = t_rad.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn roll_derivative(t_rad: f64) -> Matrix3<f64> {
    let (s, c) = t_rad.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

/// Rotation from angles in degrees; does not require a full pose.
pub fn rotation_from_angles(azimuth: f64, elevation: f64, theta: f64) -> Matrix3<f64> {
    roll(theta.to_radians()) * tilt(elevation.to_radians()) * pan(azimuth.to_radians())
}

pub fn rotation_from_pose(pose: &CameraPose) -> Matrix3<f64> {
    rotation_from_angles(pose.azimuth, pose.elevation, pose.theta)
}

/// Projects a world point to pixels.
pub fn project(pose: &CameraPose, x: &Point3) -> Result<Point2, GeometryError> {
    project_with(&rotation_from_pose(pose), pose, x)
}

/// [`project`] with a precomputed rotation, for projecting many points.
pub fn project_with(
    rotation: &Matrix3<f64>,
    pose: &CameraPose,
    x: &Point3,
) -> Result<Point2, GeometryError> {
    let p = rotation * x.to_vector();
    let depth = p.y + pose.distance;
    if depth <= DEPTH_EPS {
        return Err(GeometryError::BehindCamera { depth });
    }
    Ok(Point2::new(
        pose.focal * p.x / depth + pose.translation.x,
        -pose.focal * p.z / depth + pose.translation.y,
    ))
}

/// Order of the columns returned by [`project_with_jacobian`].
pub const JACOBIAN_PARAMS: [&str; 6] = [
    "azimuth_rad",
    "elevation_rad",
    "theta_rad",
    "distance",
    "tx",
    "ty",
];

/// Projection plus its derivatives with respect to
/// `(azimuth, elevation, theta)` in radians, distance, `tx` and `ty`.
pub fn project_with_jacobian(
    pose: &CameraPose,
    x: &Point3,
) -> Result<(Point2, [[f64; 6]; 2]), GeometryError> {
    let (a, e, t) = (
        pose.azimuth.to_radians(),
        pose.elevation.to_radians(),
        pose.theta.to_radians(),
    );
    let (rp, rt, rr) = (pan(a), tilt(e), roll(t));
    let xv = x.to_vector();
    let p = rr * rt * rp * xv;
    let depth = p.y + pose.distance;
    if depth <= DEPTH_EPS {
        return Err(GeometryError::BehindCamera { depth });
    }
    let dp = [
        rr * rt * pan_derivative(a) * xv,
        rr * tilt_derivative(e) * rp * xv,
        roll_derivative(t) * rt * rp * xv,
    ];
    let f = pose.focal;
    let z2 = depth * depth;
    let mut jac = [[0.0; 6]; 2];
    for (k, d) in dp.iter().enumerate() {
        jac[0][k] = f * (d.x * depth - p.x * d.y) / z2;
        jac[1][k] = -f * (d.z * depth - p.z * d.y) / z2;
    }
    jac[0][3] = -f * p.x / z2;
    jac[1][3] = f * p.z / z2;
    jac[0][4] = 1.0;
    jac[1][5] = 1.0;
    let uv = Point2::new(
        f * p.x / depth + pose.translation.x,
        -f * p.z / depth + pose.translation.y,
    );
    Ok((uv, jac))
}
