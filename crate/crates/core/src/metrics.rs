//! Detection precision/recall and pose jitter.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use thiserror::Error;

use crate::assembler::MarkerDetection;
use crate::geometry::{RigidTransform, Vec3};
use crate::synth::GroundTruth;

/// Mean corner error below which a correct-id detection counts as located.
pub const LOCATION_GATE_PX: f64 = 5.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// False when there were no detections; precision is then reported
    /// as 1.0.
    pub precision_defined: bool,
    pub counts: EvalCounts,
}

/// Mean distance between detected corners and their visible ground truth,
/// or `None` when no detected corner is visible in the truth.
pub fn mean_corner_error(det: &MarkerDetection, gt: &GroundTruth) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (col, corners) in &det.columns {
        let Some(truth) = gt.corners.get(*col) else { continue };
        for (p, t) in corners.iter().zip(truth) {
            if t.visible {
                sum += (p - t.pos).norm();
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

impl EvalCounts {
    /// Scores one image. `present` decides which ground-truth markers are
    /// expected to be found.
    pub fn add_image(
        &mut self,
        dets: &[MarkerDetection],
        truths: &[GroundTruth],
        gate_px: f64,
        present: impl Fn(&GroundTruth) -> bool,
    ) {
        let mut found = vec![false; truths.len()];
        for d in dets {
            let hit = truths.iter().enumerate().position(|(i, g)| {
                !found[i] && g.marker == d.id && mean_corner_error(d, g).is_some_and(|e| e < gate_px)
            });
            match hit {
                Some(i) => {
                    found[i] = true;
                    self.tp += 1;
                }
                None => self.fp += 1,
            }
        }
        self.fn_ += truths.iter().zip(&found).filter(|(g, f)| !**f && present(g)).count();
    }

    pub fn rates(&self) -> PrecisionRecall {
        let detected = self.tp + self.fp;
        let expected = self.tp + self.fn_;
        PrecisionRecall {
            precision: if detected > 0 {
                self.tp as f64 / detected as f64
            } else {
                1.0
            },
            recall: if expected > 0 {
                self.tp as f64 / expected as f64
            } else {
                1.0
            },
            precision_defined: detected > 0,
            counts: *self,
        }
    }
}

/// Precision and recall over a set of images, each a pair of detections
/// and ground-truth markers, all of which count as present.
pub fn precision_recall(images: &[(Vec<MarkerDetection>, Vec<GroundTruth>)]) -> PrecisionRecall {
    let mut c = EvalCounts::default();
    for (dets, truths) in images {
        c.add_image(dets, truths, LOCATION_GATE_PX, |_| true);
    }
    c.rates()
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("jitter needs at least 2 poses, got {0}")]
pub struct JitterError(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterReport {
    /// RMS geodesic angle to the mean rotation, degrees.
    pub rotation_std: f64,
    /// Root-sum-square of the per-axis translation standard deviations, mm.
    pub translation_std: f64,
    pub samples: usize,
}

/// Chordal L2 mean of rotations: the projection of their matrix sum onto
/// SO(3).
pub fn chordal_mean(rots: &[UnitQuaternion<f64>]) -> UnitQuaternion<f64> {
    let sum: Matrix3<f64> = rots.iter().map(|q| q.to_rotation_matrix().into_inner()).sum();
    let svd = sum.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let d = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, (u * vt).determinant().signum()));
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(u * d * vt))
}

pub fn jitter_std(poses: &[RigidTransform]) -> Result<JitterReport, JitterError> {
    let n = poses.len();
    if n < 2 {
        return Err(JitterError(n));
    }
    let dof = (n - 1) as f64;
    let rots: Vec<_> = poses.iter().map(|p| p.rotation).collect();
    let mean = chordal_mean(&rots);
    let rotation_std = (rots.iter().map(|q| mean.angle_to(q).powi(2)).sum::<f64>() / dof)
        .sqrt()
        .to_degrees();
    let tmean = poses.iter().map(|p| p.translation).sum::<Vec3>() / n as f64;
    let var: Vec3 = poses
        .iter()
        .map(|p| (p.translation - tmean).component_mul(&(p.translation - tmean)))
        .sum::<Vec3>()
        / dof;
    Ok(JitterReport {
        rotation_std,
        translation_std: var.map(f64::sqrt).norm(),
        samples: n,
    })
}
