//! Geometric primitives: points, lines, rigid transforms, pinhole projection
//! and the cross-ratio.
//!
//! Image coordinates are pixels with the origin at the centre of the top-left
//! pixel; model coordinates are millimetres.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2, Matrix3, Rotation3, SymmetricEigen, Unit, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

/// Relative collinearity tolerance for cross-ratio inputs.
pub const COLLINEAR_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("coincident points in cross-ratio input")]
    CoincidentPoints,
    #[error("points are not collinear (deviation {deviation:.3e}, span {span:.3e})")]
    NotCollinear { deviation: f64, span: f64 },
    #[error("line fit needs at least two distinct points, got {0}")]
    TooFewPoints(usize),
    #[error("lines are parallel or nearly parallel")]
    ParallelLines,
    #[error("point at depth {0} is not in front of the camera")]
    BehindCamera(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Cross-ratio of four ordered scalar positions `c1 < c2 < c3 < c4`:
/// `(|c1c3| · |c4c2|) / (|c3c2| · |c1c4|)`.
pub fn cross_ratio_scalar(c1: f64, c2: f64, c3: f64, c4: f64) -> Result<f64, GeometryError> {
    let span = (c4 - c1).abs().max((c3 - c2).abs()).max(f64::MIN_POSITIVE);
    let eps = 1e-12 * span.max(1.0);
    let c32 = (c3 - c2).abs();
    let c14 = (c1 - c4).abs();
    if c32 <= eps || c14 <= eps || (c2 - c1).abs() <= eps || (c4 - c3).abs() <= eps {
        return Err(GeometryError::CoincidentPoints);
    }
    Ok(((c1 - c3).abs() * (c4 - c2).abs()) / (c32 * c14))
}

/// Same quantity as [`cross_ratio_scalar`] computed from Euclidean distances of
/// arbitrary points, with no collinearity or degeneracy checks.
pub fn cross_ratio_euclidean<const D: usize>(p: &[nalgebra::SVector<f64, D>; 4]) -> f64 {
    let d = |i: usize, j: usize| (p[i] - p[j]).norm();
    (d(0, 2) * d(3, 1)) / (d(2, 1) * d(0, 3))
}

/// Cross-ratio of four collinear 2D points given in order along their line.
pub fn cross_ratio(points: &[Vec2; 4]) -> Result<f64, GeometryError> {
    let span = (points[3] - points[0]).norm();
    if span <= 0.0 {
        return Err(GeometryError::CoincidentPoints);
    }
    let dir = (points[3] - points[0]) / span;
    let normal = Vec2::new(-dir.y, dir.x);
    let deviation = points
        .iter()
        .map(|p| (p - points[0]).dot(&normal).abs())
        .fold(0.0, f64::max);
    if deviation > COLLINEAR_TOL * span {
        return Err(GeometryError::NotCollinear { deviation, span });
    }
    let t: Vec<f64> = points.iter().map(|p| (p - points[0]).dot(&dir)).collect();
    cross_ratio_scalar(t[0], t[1], t[2], t[3])
}

/// Cross-ratio of four collinear 3D points given in order along their line.
pub fn cross_ratio_3d(points: &[Vec3; 4]) -> Result<f64, GeometryError> {
    let span = (points[3] - points[0]).norm();
    if span <= 0.0 {
        return Err(GeometryError::CoincidentPoints);
    }
    let dir = (points[3] - points[0]) / span;
    let deviation = points
        .iter()
        .map(|p| {
            let v = p - points[0];
            (v - dir * v.dot(&dir)).norm()
        })
        .fold(0.0, f64::max);
    if deviation > COLLINEAR_TOL * span {
        return Err(GeometryError::NotCollinear { deviation, span });
    }
    let t: Vec<f64> = points.iter().map(|p| (p - points[0]).dot(&dir)).collect();
    cross_ratio_scalar(t[0], t[1], t[2], t[3])
}

/// Implicit 2D line `{p : n·p + d = 0}` with unit normal `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line2 {
    pub normal: Vec2,
    pub offset: f64,
}

impl Line2 {
    /// Builds a line from a (not necessarily unit) normal and offset.
    pub fn new(normal: Vec2, offset: f64) -> Self {
        let n = normal.norm();
        Self {
            normal: normal / n,
            offset: offset / n,
        }
    }

    pub fn from_point_direction(point: Vec2, direction: Vec2) -> Self {
        let normal = Vec2::new(-direction.y, direction.x).normalize();
        Self {
            normal,
            offset: -normal.dot(&point),
        }
    }

    pub fn through(a: Vec2, b: Vec2) -> Self {
        Self::from_point_direction(a, b - a)
    }

    /// Unit direction, the normal rotated by -90°.
    pub fn direction(&self) -> Vec2 {
        Vec2::new(self.normal.y, -self.normal.x)
    }

    pub fn signed_distance(&self, p: &Vec2) -> f64 {
        self.normal.dot(p) + self.offset
    }

    pub fn distance(&self, p: &Vec2) -> f64 {
        self.signed_distance(p).abs()
    }

    /// Foot of the perpendicular from `p`.
    pub fn project(&self, p: &Vec2) -> Vec2 {
        p - self.normal * self.signed_distance(p)
    }

    /// Moves the line by `delta` along its normal.
    pub fn shifted(&self, delta: f64) -> Self {
        Self {
            normal: self.normal,
            offset: self.offset - delta,
        }
    }

    pub fn flipped(&self) -> Self {
        Self {
            normal: -self.normal,
            offset: -self.offset,
        }
    }
}

/// Total-least-squares line: principal direction of the centred points.
pub fn fit_line_tls(points: &[Vec2]) -> Result<Line2, GeometryError> {
    let weights = vec![1.0; points.len()];
    fit_line_weighted(points, &weights)
}

/// Weighted total-least-squares line fit.
pub fn fit_line_weighted(points: &[Vec2], weights: &[f64]) -> Result<Line2, GeometryError> {
    assert_eq!(points.len(), weights.len());
    let wsum: f64 = weights.iter().sum();
    if points.len() < 2 || wsum <= 0.0 {
        return Err(GeometryError::TooFewPoints(points.len()));
    }
    let mean = points
        .iter()
        .zip(weights)
        .fold(Vec2::zeros(), |acc, (p, w)| acc + p * *w)
        / wsum;
    let mut cov = Matrix2::zeros();
    for (p, w) in points.iter().zip(weights) {
        let d = p - mean;
        cov += d * d.transpose() * *w;
    }
    cov /= wsum;
    let scale = cov.trace();
    if !(scale > 1e-18 * (1.0 + mean.norm_squared())) {
        return Err(GeometryError::TooFewPoints(1));
    }
    let eig = SymmetricEigen::new(cov);
    let imin = if eig.eigenvalues[0] <= eig.eigenvalues[1] { 0 } else { 1 };
    let normal: Vec2 = eig.eigenvectors.column(imin).into_owned().normalize();
    Ok(Line2 {
        normal,
        offset: -normal.dot(&mean),
    })
}

/// Intersection of two lines.
pub fn intersect(l1: &Line2, l2: &Line2) -> Result<Vec2, GeometryError> {
    let det = l1.normal.x * l2.normal.y - l1.normal.y * l2.normal.x;
    if det.abs() <= 1e-8 {
        return Err(GeometryError::ParallelLines);
    }
    let x = (-l1.offset * l2.normal.y + l2.offset * l1.normal.y) / det;
    let y = (-l2.offset * l1.normal.x + l1.offset * l2.normal.x) / det;
    Ok(Vec2::new(x, y))
}

/// Rigid motion `x ↦ R·x + t`. Translation in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    /// From a rotation matrix; the matrix is re-orthonormalised.
    pub fn from_matrix(r: &Matrix3<f64>, translation: Vec3) -> Self {
        let rot = Rotation3::from_matrix(r);
        Self {
            rotation: UnitQuaternion::from_rotation_matrix(&rot),
            translation,
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        Self {
            rotation: UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle),
            translation,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Pinhole intrinsics with optional even radial distortion `k1 r² + k2 r⁴`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        Self::with_distortion(fx, fy, cx, cy, 0.0, 0.0)
    }

    pub fn with_distortion(fx: f64, fy: f64, cx: f64, cy: f64, k1: f64, k2: f64) -> Result<Self, GeometryError> {
        let all = [fx, fy, cx, cy, k1, k2];
        if all.iter().any(|v| !v.is_finite()) || fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "fx={fx} fy={fy} cx={cx} cy={cy} k1={k1} k2={k2}"
            )));
        }
        Ok(Self { fx, fy, cx, cy, k1, k2 })
    }

    pub fn has_distortion(&self) -> bool {
        self.k1 != 0.0 || self.k2 != 0.0
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    fn radial(&self, xn: &Vec2) -> f64 {
        let r2 = xn.norm_squared();
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }

    /// Normalised undistorted coordinates to pixels (applies distortion).
    pub fn normalized_to_pixel(&self, xn: &Vec2) -> Vec2 {
        let xd = xn * self.radial(xn);
        Vec2::new(self.fx * xd.x + self.cx, self.fy * xd.y + self.cy)
    }

    /// Pixels to normalised undistorted coordinates (fixed-point inversion of
    /// the radial model).
    pub fn pixel_to_normalized(&self, p: &Vec2) -> Vec2 {
        let xd = Vec2::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy);
        if !self.has_distortion() {
            return xd;
        }
        let mut xn = xd;
        for _ in 0..50 {
            let next = xd / self.radial(&xn);
            if (next - xn).norm() < 1e-15 {
                xn = next;
                break;
            }
            xn = next;
        }
        xn
    }

    /// Removes lens distortion from a pixel position.
    pub fn undistort_pixel(&self, p: &Vec2) -> Vec2 {
        if !self.has_distortion() {
            return *p;
        }
        let xn = self.pixel_to_normalized(p);
        Vec2::new(self.fx * xn.x + self.cx, self.fy * xn.y + self.cy)
    }

    /// Projects a point given in camera coordinates.
    pub fn project_camera_point(&self, pc: &Vec3) -> Result<Vec2, GeometryError> {
        if !(pc.z > 1e-6) {
            return Err(GeometryError::BehindCamera(pc.z));
        }
        Ok(self.normalized_to_pixel(&Vec2::new(pc.x / pc.z, pc.y / pc.z)))
    }

    /// Back-projects a pixel to the camera-frame point at the given depth.
    pub fn unproject(&self, p: &Vec2, depth: f64) -> Vec3 {
        let xn = self.pixel_to_normalized(p);
        Vec3::new(xn.x * depth, xn.y * depth, depth)
    }

    /// The same camera without its distortion terms.
    pub fn undistorted(&self) -> Self {
        Self {
            k1: 0.0,
            k2: 0.0,
            ..*self
        }
    }
}

impl fmt::Display for CameraIntrinsics {
    /// Intrinsics file format: `fx fy cx cy [k1 k2]`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.fx, self.fy, self.cx, self.cy)?;
        if self.has_distortion() {
            write!(f, " {} {}", self.k1, self.k2)?;
        }
        Ok(())
    }
}

impl FromStr for CameraIntrinsics {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| GeometryError::InvalidIntrinsics(e.to_string()))?;
        match vals.as_slice() {
            [fx, fy, cx, cy] => Self::new(*fx, *fy, *cx, *cy),
            [fx, fy, cx, cy, k1, k2] => Self::with_distortion(*fx, *fy, *cx, *cy, *k1, *k2),
            _ => Err(GeometryError::InvalidIntrinsics(format!(
                "expected 4 or 6 values, got {}",
                vals.len()
            ))),
        }
    }
}

/// Projects model point `p` through pose `t` and camera `k`.
pub fn project(k: &CameraIntrinsics, t: &RigidTransform, p: &Vec3) -> Result<Vec2, GeometryError> {
    k.project_camera_point(&t.apply(p))
}

/// Geodesic rotation angle (degrees) and translation distance (mm) between
/// two poses.
pub fn pose_delta(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
    let rel = a.rotation.inverse() * b.rotation;
    (rel.angle().to_degrees(), (a.translation - b.translation).norm())
}

/// Skew-symmetric matrix of `v`.
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
