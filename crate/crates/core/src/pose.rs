//! Pose estimation from decoded corners and multi-view reconstruction of
//! the marker's corner model.
//!
//! All image points are undistorted pixels. Poses map model coordinates
//! into the camera frame.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Matrix6, SMatrix, UnitQuaternion, Vector4, Vector6};
use thiserror::Error;

use crate::assembler::MarkerDetection;
use crate::geometry::{skew, CameraIntrinsics, RigidTransform, Vec2, Vec3};
use crate::layout::{CornerModel, MODEL_MAGIC};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("need at least {need} correspondences, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("correspondences are degenerate for the linear solver")]
    Degenerate,
    #[error("a model point lies behind the camera")]
    BehindCamera,
    #[error("optimisation diverged")]
    Diverged,
    #[error("need at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error("frame {0} shares too few points with the registered frames")]
    Disconnected(usize),
    #[error("malformed object model at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub model: Vec3,
    pub image: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpOptions {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    /// Huber threshold in pixels; plain least squares when `None`.
    pub huber: Option<f64>,
}

impl Default for PnpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tolerance: 1e-10,
            huber: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: RigidTransform,
    pub rms: f64,
    /// Reprojection error magnitude per correspondence (px).
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

impl PoseEstimate {
    /// `qw qx qy qz tx ty tz rms_px`.
    pub fn to_line(&self) -> String {
        let q = self.pose.rotation.quaternion();
        let t = self.pose.translation;
        format!(
            "{:.9} {:.9} {:.9} {:.9} {:.6} {:.6} {:.6} {:.6}",
            q.w, q.i, q.j, q.k, t.x, t.y, t.z, self.rms
        )
    }

    pub fn from_line(line: &str) -> Option<(RigidTransform, f64)> {
        let v: Vec<f64> = line.split_whitespace().map(|s| s.parse().ok()).collect::<Option<_>>()?;
        if v.len() != 8 {
            return None;
        }
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]));
        Some((RigidTransform::new(q, Vec3::new(v[4], v[5], v[6])), v[7]))
    }
}

fn pinhole(k: &CameraIntrinsics, pc: &Vec3) -> Vec2 {
    Vec2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy)
}

fn projection_derivative(k: &CameraIntrinsics, pc: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz * iz,
    )
}

/// One point seen by a camera rigidly attached to the posed rig.
#[derive(Debug, Clone, Copy)]
struct Observation {
    /// Rig frame to this camera.
    camera: RigidTransform,
    model: Vec3,
    image: Vec2,
}

/// Jacobian of the projected pixel with respect to the pose perturbation
/// `(ω, v)`, where `R ← exp(ω)·R` and `t ← t + v`.
pub fn reprojection_jacobian(k: &CameraIntrinsics, pose: &RigidTransform, p: &Vec3) -> Matrix2x6 {
    rig_jacobian(k, &RigidTransform::identity(), pose, p)
}

fn rig_jacobian(k: &CameraIntrinsics, cam: &RigidTransform, pose: &RigidTransform, p: &Vec3) -> Matrix2x6 {
    let rp = pose.rotation * p;
    let pc = cam.apply(&(rp + pose.translation));
    let dproj = projection_derivative(k, &pc);
    let rc = cam.rotation_matrix();
    let mut d = SMatrix::<f64, 3, 6>::zeros();
    d.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rc * skew(&rp)));
    d.fixed_view_mut::<3, 3>(0, 3).copy_from(&rc);
    dproj * d
}

/// Applies the perturbation of [`reprojection_jacobian`].
pub fn perturb(pose: &RigidTransform, delta: &Vector6<f64>) -> RigidTransform {
    let w = Vec3::new(delta[0], delta[1], delta[2]);
    let v = Vec3::new(delta[3], delta[4], delta[5]);
    RigidTransform::new(
        UnitQuaternion::from_scaled_axis(w) * pose.rotation,
        pose.translation + v,
    )
}

fn residual_norms(k: &CameraIntrinsics, obs: &[Observation], pose: &RigidTransform) -> Option<Vec<f64>> {
    obs.iter()
        .map(|o| {
            let pc = o.camera.apply(&pose.apply(&o.model));
            (pc.z > 1e-9).then(|| (pinhole(k, &pc) - o.image).norm())
        })
        .collect()
}

fn robust_weight(r: f64, huber: Option<f64>) -> f64 {
    match huber {
        Some(d) if r > d => d / r,
        _ => 1.0,
    }
}

fn cost(res: &[f64], huber: Option<f64>) -> f64 {
    res.iter()
        .map(|&r| match huber {
            Some(d) if r > d => d * (2.0 * r - d),
            _ => r * r,
        })
        .sum()
}

fn gauss_newton(
    k: &CameraIntrinsics,
    obs: &[Observation],
    init: RigidTransform,
    opts: &PnpOptions,
) -> Result<PoseEstimate, PoseError> {
    let mut pose = init;
    let mut res = residual_norms(k, obs, &pose).ok_or(PoseError::BehindCamera)?;
    let mut c = cost(&res, opts.huber);
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (o, &r) in obs.iter().zip(&res) {
            let pc = o.camera.apply(&pose.apply(&o.model));
            let e = pinhole(k, &pc) - o.image;
            let j = rig_jacobian(k, &o.camera, &pose, &o.model);
            let w = robust_weight(r, opts.huber);
            h += w * j.transpose() * j;
            g += w * j.transpose() * e;
        }
        let Some(chol) = h.cholesky() else {
            return Err(PoseError::Degenerate);
        };
        let mut step = -chol.solve(&g);
        let mut accepted = false;
        for _ in 0..40 {
            let cand = perturb(&pose, &step);
            if let Some(r) = residual_norms(k, obs, &cand) {
                let cc = cost(&r, opts.huber);
                if !cc.is_finite() {
                    return Err(PoseError::Diverged);
                }
                if cc <= c {
                    pose = cand;
                    res = r;
                    c = cc;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted || step.norm() < opts.step_tolerance {
            break;
        }
    }
    let rms = (res.iter().map(|r| r * r).sum::<f64>() / res.len() as f64).sqrt();
    if !rms.is_finite() {
        return Err(PoseError::Diverged);
    }
    Ok(PoseEstimate {
        pose,
        rms,
        residuals: res,
        iterations,
    })
}

fn single_camera(c: &[Correspondence]) -> Vec<Observation> {
    c.iter()
        .map(|c| Observation {
            camera: RigidTransform::identity(),
            model: c.model,
            image: c.image,
        })
        .collect()
}

/// Linear pose from at least six non-coplanar correspondences.
pub fn dlt_pose(c: &[Correspondence], k: &CameraIntrinsics) -> Result<RigidTransform, PoseError> {
    if c.len() < 6 {
        return Err(PoseError::TooFewPoints { need: 6, got: c.len() });
    }
    let k = k.undistorted();
    let n = c.len() as f64;
    let centroid = c.iter().map(|c| c.model).sum::<Vec3>() / n;
    let scale = (c.iter().map(|c| (c.model - centroid).norm()).sum::<f64>() / n).max(1e-12) / 3f64.sqrt();
    let mut a = DMatrix::<f64>::zeros(2 * c.len(), 12);
    for (i, c) in c.iter().enumerate() {
        let x = k.pixel_to_normalized(&c.image);
        let p = (c.model - centroid) / scale;
        let ph = Vector4::new(p.x, p.y, p.z, 1.0);
        for j in 0..4 {
            a[(2 * i, j)] = ph[j];
            a[(2 * i, 8 + j)] = -x.x * ph[j];
            a[(2 * i + 1, 4 + j)] = ph[j];
            a[(2 * i + 1, 8 + j)] = -x.y * ph[j];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or(PoseError::Degenerate)?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let (smallest, second) = (order[order.len() - 1], order[order.len() - 2]);
    if sv[second] <= 1e-10 * sv[order[0]] {
        return Err(PoseError::Degenerate);
    }
    let v = vt.row(smallest);
    let mut m = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let mut t = Vec3::new(v[3], v[7], v[11]);
    if m.determinant() < 0.0 {
        m = -m;
        t = -t;
    }
    let msvd = m.svd(true, true);
    let (u, vt) = (
        msvd.u.ok_or(PoseError::Degenerate)?,
        msvd.v_t.ok_or(PoseError::Degenerate)?,
    );
    let s = msvd.singular_values.mean();
    if !(s > 0.0) {
        return Err(PoseError::Degenerate);
    }
    let r = u * vt;
    // undo the model normalisation
    let t = t / s * scale;
    Ok(RigidTransform::from_matrix(&r, t - r * centroid))
}

/// Linear initialisation followed by damped Gauss–Newton.
pub fn solve_pnp(c: &[Correspondence], k: &CameraIntrinsics) -> Result<PoseEstimate, PoseError> {
    solve_pnp_with(c, k, &PnpOptions::default())
}

pub fn solve_pnp_with(
    c: &[Correspondence],
    k: &CameraIntrinsics,
    opts: &PnpOptions,
) -> Result<PoseEstimate, PoseError> {
    let init = dlt_pose(c, k)?;
    gauss_newton(&k.undistorted(), &single_camera(c), init, opts)
}

/// Gauss–Newton from a given pose; works with as few as three points, for
/// example the four coplanar corners of one quad.
pub fn refine_pose(
    c: &[Correspondence],
    k: &CameraIntrinsics,
    init: &RigidTransform,
    opts: &PnpOptions,
) -> Result<PoseEstimate, PoseError> {
    if c.len() < 3 {
        return Err(PoseError::TooFewPoints { need: 3, got: c.len() });
    }
    gauss_newton(&k.undistorted(), &single_camera(c), *init, opts)
}

/// Least-squares rigid motion with `dst ≈ T(src)`.
pub fn align_rigid(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform, PoseError> {
    if src.len() < 3 || src.len() != dst.len() {
        return Err(PoseError::TooFewPoints {
            need: 3,
            got: src.len().min(dst.len()),
        });
    }
    let n = src.len() as f64;
    let (cs, cd) = (src.iter().sum::<Vec3>() / n, dst.iter().sum::<Vec3>() / n);
    let mut h = Matrix3::<f64>::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (
        svd.u.ok_or(PoseError::Degenerate)?,
        svd.v_t.ok_or(PoseError::Degenerate)?,
    );
    let fix = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, (u * vt).determinant().signum()));
    let r = u * fix * vt;
    Ok(RigidTransform::from_matrix(&r, cd - r * cs))
}

/// Root-mean-square distance after rigid alignment of `a` onto `b`.
pub fn aligned_rmse(a: &[Vec3], b: &[Vec3]) -> Result<f64, PoseError> {
    let t = align_rigid(a, b)?;
    let s: f64 = a.iter().zip(b).map(|(p, q)| (t.apply(p) - q).norm_squared()).sum();
    Ok((s / a.len() as f64).sqrt())
}

/// Identity of one marker corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CornerKey {
    pub marker: u32,
    pub column: usize,
    pub corner: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Ideal,
    Reconstructed,
}

pub const OBJECT_MAGIC: &str = "cylindertag-object v1";

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub points: BTreeMap<CornerKey, Vec3>,
    pub provenance: Provenance,
}

impl ObjectModel {
    pub fn from_corner_model(m: &CornerModel) -> Self {
        let mut points = BTreeMap::new();
        for (column, col) in m.corners.iter().enumerate() {
            for (corner, p) in col.iter().enumerate() {
                points.insert(
                    CornerKey {
                        marker: m.marker,
                        column,
                        corner,
                    },
                    *p,
                );
            }
        }
        Self {
            points,
            provenance: Provenance::Ideal,
        }
    }

    /// Model points matched to the corners of a detection.
    pub fn correspondences(&self, det: &MarkerDetection) -> Vec<Correspondence> {
        let mut out = Vec::new();
        for (column, corners) in &det.columns {
            for (corner, image) in corners.iter().enumerate() {
                let key = CornerKey {
                    marker: det.id,
                    column: *column,
                    corner,
                };
                if let Some(model) = self.points.get(&key) {
                    out.push(Correspondence {
                        model: *model,
                        image: *image,
                    });
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let tag = match self.provenance {
            Provenance::Ideal => "ideal",
            Provenance::Reconstructed => "reconstructed",
        };
        let mut s = format!("{OBJECT_MAGIC} provenance={tag}\n");
        for (k, p) in &self.points {
            let _ = writeln!(
                s,
                "{} {} {} {:.6} {:.6} {:.6}",
                k.marker, k.column, k.corner, p.x, p.y, p.z
            );
        }
        s
    }

    /// Reads an object model, or a layout corner model as an ideal one.
    pub fn from_text(text: &str) -> Result<Self, PoseError> {
        let bad = |line: usize, reason: &str| PoseError::Malformed {
            line,
            reason: reason.into(),
        };
        let first = text
            .lines()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| bad(1, "empty file"))?;
        if first.starts_with(MODEL_MAGIC) {
            let m = CornerModel::from_text(text).map_err(|e| bad(0, &e.to_string()))?;
            return Ok(Self::from_corner_model(&m));
        }
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
        let rest = match header.strip_prefix("cylindertag-object ") {
            Some(r) if header.starts_with(OBJECT_MAGIC) => &r[2..],
            Some(_) => return Err(bad(1, "unsupported version")),
            None => return Err(bad(1, "missing header")),
        };
        let provenance = match rest.trim() {
            "provenance=ideal" => Provenance::Ideal,
            "provenance=reconstructed" => Provenance::Reconstructed,
            _ => return Err(bad(1, "bad provenance")),
        };
        let mut points = BTreeMap::new();
        for (i, l) in lines {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 6 {
                return Err(bad(i + 1, "expected `marker column corner x y z`"));
            }
            let key = CornerKey {
                marker: f[0].parse().map_err(|_| bad(i + 1, "bad marker"))?,
                column: f[1].parse().map_err(|_| bad(i + 1, "bad column"))?,
                corner: f[2].parse().map_err(|_| bad(i + 1, "bad corner"))?,
            };
            let mut v = [0.0; 3];
            for (d, s) in v.iter_mut().zip(&f[3..]) {
                *d = s.parse().map_err(|_| bad(i + 1, "bad coordinate"))?;
            }
            if points.insert(key, Vec3::new(v[0], v[1], v[2])).is_some() {
                return Err(bad(i + 1, "duplicate corner"));
            }
        }
        Ok(Self { points, provenance })
    }
}

/// Corner observations of one calibrated stereo pair.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoFrame {
    pub left: BTreeMap<CornerKey, Vec2>,
    pub right: BTreeMap<CornerKey, Vec2>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoRig {
    pub intrinsics: CameraIntrinsics,
    /// Left camera frame to right camera frame.
    pub left_to_right: RigidTransform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructOptions {
    pub max_rounds: usize,
    /// Stop once the overall RMS changes by less than this (px).
    pub rms_tolerance: f64,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self {
            max_rounds: 100,
            rms_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Points in the left camera frame of frame 0.
    pub model: ObjectModel,
    /// Model to left camera, per frame; frame 0 is the identity.
    pub poses: Vec<RigidTransform>,
    pub rms: f64,
    /// RMS reprojection error per corner over all its observations.
    pub corner_rms: BTreeMap<CornerKey, f64>,
    pub rounds: usize,
}

fn reprojection(k: &CameraIntrinsics, cam: &RigidTransform, p: &Vec3, image: &Vec2) -> Option<Vec2> {
    let pc = cam.apply(p);
    (pc.z > 1e-9).then(|| pinhole(k, &pc) - image)
}

/// Minimises the reprojection error of one point seen by posed cameras.
fn refine_point(k: &CameraIntrinsics, views: &[(RigidTransform, Vec2)], init: Vec3) -> Vec3 {
    let cost = |x: &Vec3| -> f64 {
        views
            .iter()
            .map(|(c, u)| reprojection(k, c, x, u).map_or(f64::INFINITY, |e| e.norm_squared()))
            .sum()
    };
    let mut x = init;
    let mut c = cost(&x);
    for _ in 0..20 {
        let mut h = Matrix3::<f64>::zeros();
        let mut g = Vec3::zeros();
        for (cam, u) in views {
            let pc = cam.apply(&x);
            let j = projection_derivative(k, &pc) * cam.rotation_matrix();
            let e = pinhole(k, &pc) - u;
            h += j.transpose() * j;
            g += j.transpose() * e;
        }
        let Some(chol) = h.cholesky() else { break };
        let mut step = -chol.solve(&g);
        let mut moved = false;
        for _ in 0..30 {
            let cand = x + step;
            let cc = cost(&cand);
            if cc <= c {
                x = cand;
                c = cc;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved || step.norm() < 1e-12 {
            break;
        }
    }
    x
}

/// Linear two-view triangulation refined on reprojection error.
pub fn triangulate(k: &CameraIntrinsics, views: &[(RigidTransform, Vec2)]) -> Option<Vec3> {
    if views.len() < 2 {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (i, (cam, u)) in views.iter().enumerate() {
        let x = k.pixel_to_normalized(u);
        let r = cam.rotation_matrix();
        let t = cam.translation;
        for j in 0..3 {
            a[(2 * i, j)] = x.x * r[(2, j)] - r[(0, j)];
            a[(2 * i + 1, j)] = x.y * r[(2, j)] - r[(1, j)];
        }
        a[(2 * i, 3)] = x.x * t.z - t.x;
        a[(2 * i + 1, 3)] = x.y * t.z - t.y;
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let sv = &svd.singular_values;
    let i = (0..sv.len()).min_by(|&i, &j| sv[i].total_cmp(&sv[j]))?;
    let h = vt.row(i);
    if h[3].abs() < 1e-12 {
        return None;
    }
    let x = Vec3::new(h[0], h[1], h[2]) / h[3];
    Some(refine_point(k, views, x))
}

/// Recovers the 3D corner model from stereo observations of a static
/// marker, in the left camera frame of the first pair.
pub fn reconstruct(frames: &[StereoFrame], rig: &StereoRig) -> Result<Reconstruction, PoseError> {
    reconstruct_with(frames, rig, &ReconstructOptions::default())
}

pub fn reconstruct_with(
    frames: &[StereoFrame],
    rig: &StereoRig,
    opts: &ReconstructOptions,
) -> Result<Reconstruction, PoseError> {
    if frames.len() < 2 {
        return Err(PoseError::TooFewFrames {
            need: 2,
            got: frames.len(),
        });
    }
    let k = rig.intrinsics.undistorted();
    let id = RigidTransform::identity();
    let lr = rig.left_to_right;

    // per-frame triangulation in each left camera frame
    let local: Vec<BTreeMap<CornerKey, Vec3>> = frames
        .iter()
        .map(|f| {
            f.left
                .iter()
                .filter_map(|(key, ul)| {
                    let ur = f.right.get(key)?;
                    triangulate(&k, &[(id, *ul), (lr, *ur)]).map(|p| (*key, p))
                })
                .collect()
        })
        .collect();

    // greedy registration into frame 0's coordinates
    let mut poses: Vec<Option<RigidTransform>> = vec![None; frames.len()];
    poses[0] = Some(id);
    let mut sums: BTreeMap<CornerKey, (Vec3, usize)> = local[0].iter().map(|(k, p)| (*k, (*p, 1))).collect();
    loop {
        let mut progress = false;
        for i in 0..frames.len() {
            if poses[i].is_some() {
                continue;
            }
            let (src, dst): (Vec<Vec3>, Vec<Vec3>) = local[i]
                .iter()
                .filter_map(|(key, p)| sums.get(key).map(|(s, n)| (*p, s / *n as f64)))
                .unzip();
            if src.len() < 3 {
                continue;
            }
            // model point = inverse(pose) · camera point
            let to_model = align_rigid(&src, &dst)?;
            for (key, p) in &local[i] {
                let e = sums.entry(*key).or_insert((Vec3::zeros(), 0));
                e.0 += to_model.apply(p);
                e.1 += 1;
            }
            poses[i] = Some(to_model.inverse());
            progress = true;
        }
        if !progress {
            break;
        }
    }
    if let Some(i) = poses.iter().position(|p| p.is_none()) {
        return Err(PoseError::Disconnected(i));
    }
    let mut poses: Vec<RigidTransform> = poses.into_iter().map(Option::unwrap).collect();

    // points seen in at least two frames
    let mut seen: BTreeMap<CornerKey, BTreeSet<usize>> = BTreeMap::new();
    for (i, f) in frames.iter().enumerate() {
        for key in f.left.keys().chain(f.right.keys()) {
            seen.entry(*key).or_default().insert(i);
        }
    }
    let mut model: BTreeMap<CornerKey, Vec3> = sums
        .into_iter()
        .filter(|(key, _)| seen.get(key).is_some_and(|s| s.len() >= 2))
        .map(|(key, (s, n))| (key, s / n as f64))
        .collect();

    let observations = |i: usize, model: &BTreeMap<CornerKey, Vec3>| -> Vec<Observation> {
        let f = &frames[i];
        let side = |obs: &BTreeMap<CornerKey, Vec2>, camera: RigidTransform| {
            obs.iter()
                .filter_map(|(key, u)| {
                    model.get(key).map(|p| Observation {
                        camera,
                        model: *p,
                        image: *u,
                    })
                })
                .collect::<Vec<_>>()
        };
        let mut v = side(&f.left, id);
        v.extend(side(&f.right, lr));
        v
    };
    let total_rms = |poses: &[RigidTransform], model: &BTreeMap<CornerKey, Vec3>| -> (f64, BTreeMap<CornerKey, f64>) {
        let mut per: BTreeMap<CornerKey, (f64, usize)> = BTreeMap::new();
        let (mut s, mut n) = (0.0, 0usize);
        for (i, f) in frames.iter().enumerate() {
            for (obs, cam) in [(&f.left, id), (&f.right, lr)] {
                let c = cam.compose(&poses[i]);
                for (key, u) in obs {
                    let Some(p) = model.get(key) else { continue };
                    let e2 = reprojection(&k, &c, p, u).map_or(f64::INFINITY, |e| e.norm_squared());
                    s += e2;
                    n += 1;
                    let entry = per.entry(*key).or_insert((0.0, 0));
                    entry.0 += e2;
                    entry.1 += 1;
                }
            }
        }
        let per = per
            .into_iter()
            .map(|(key, (s, n))| (key, (s / n as f64).sqrt()))
            .collect();
        ((s / n.max(1) as f64).sqrt(), per)
    };

    let (mut rms, _) = total_rms(&poses, &model);
    let mut rounds = 0;
    while rounds < opts.max_rounds {
        rounds += 1;
        for (i, pose) in poses.iter_mut().enumerate().skip(1) {
            let obs = observations(i, &model);
            if obs.len() >= 3 {
                *pose = gauss_newton(&k, &obs, *pose, &PnpOptions::default())?.pose;
            }
        }
        for (key, p) in model.iter_mut() {
            let views: Vec<(RigidTransform, Vec2)> = frames
                .iter()
                .enumerate()
                .flat_map(|(i, f)| {
                    let pose = poses[i];
                    [(f.left.get(key), id), (f.right.get(key), lr)]
                        .into_iter()
                        .filter_map(move |(u, cam)| u.map(|u| (cam.compose(&pose), *u)))
                })
                .collect();
            *p = refine_point(&k, &views, *p);
        }
        let (next, _) = total_rms(&poses, &model);
        if !next.is_finite() {
            return Err(PoseError::Diverged);
        }
        let change = (rms - next).abs();
        rms = next;
        if change < opts.rms_tolerance {
            break;
        }
    }
    let (rms, corner_rms) = total_rms(&poses, &model);
    Ok(Reconstruction {
        model: ObjectModel {
            points: model,
            provenance: Provenance::Reconstructed,
        },
        poses,
        rms,
        corner_rms,
        rounds,
    })
}
