#![allow(dead_code)]

use cylindertag::generator::{generate, GenConfig};
use cylindertag::layout::{layout_marker, LayoutParams, MarkerLayout};
use cylindertag::Dictionary;

/// Seeded 12-column, field-2 dictionary.
pub fn dictionary_12c2f() -> Dictionary {
    let cfg = GenConfig::new(40, 12, 2, 7).unwrap();
    generate(&cfg).unwrap().dictionary
}

pub fn layout_of(dict: &Dictionary, id: u32) -> MarkerLayout {
    layout_marker(dict.marker(id).unwrap(), &LayoutParams::default()).unwrap()
}

use std::collections::BTreeMap;

use cylindertag::geometry::{CameraIntrinsics, RigidTransform, Vec2, Vec3};
use cylindertag::layout::{ideal_cylinder_model, CornerModel};
use cylindertag::pose::{CornerKey, StereoFrame, StereoRig};
use cylindertag::synth::scene_pose;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn camera() -> CameraIntrinsics {
    CameraIntrinsics::new(2400.0, 2400.0, 960.0, 600.0).unwrap()
}

pub fn ideal_model(dict: &Dictionary, id: u32) -> CornerModel {
    ideal_cylinder_model(&layout_of(dict, id))
}

/// Pixel of model point `p` if it faces the camera and lands in a
/// 1920×1200 frame.
pub fn observe(k: &CameraIntrinsics, cam: &RigidTransform, p: &Vec3) -> Option<Vec2> {
    let pc = cam.apply(p);
    let normal = cam.rotation * Vec3::new(p.x, 0.0, p.z).normalize();
    if pc.z <= 0.0 || normal.dot(&pc.normalize()) >= -0.05 {
        return None;
    }
    let u = Vec2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
    (u.x >= 0.0 && u.y >= 0.0 && u.x <= 1919.0 && u.y <= 1199.0).then_some(u)
}

/// Views all round a static marker seen by a 120 mm baseline stereo pair.
pub fn stereo_frames(
    model: &CornerModel,
    n: usize,
    sigma: f64,
    seed: u64,
) -> (Vec<StereoFrame>, StereoRig, Vec<RigidTransform>) {
    let k = camera();
    let rig = StereoRig {
        intrinsics: k,
        left_to_right: RigidTransform::from_axis_angle(Vec3::y(), -0.08, Vec3::new(-120.0, 0.0, 5.0)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
    let mut frames = Vec::new();
    let mut poses = Vec::new();
    for i in 0..n {
        // a full turn in overlapping steps
        let yaw = 360.0 * i as f64 / n as f64 + rng.random_range(-5.0..5.0);
        let pitch = rng.random_range(-30.0..30.0);
        let roll = rng.random_range(-30.0..30.0);
        let z = rng.random_range(350.0..550.0);
        let pose = scene_pose(yaw, pitch, roll, Vec3::new(60.0, 0.0, z), model.height);
        let mut f = StereoFrame {
            left: BTreeMap::new(),
            right: BTreeMap::new(),
        };
        for (column, col) in model.corners.iter().enumerate() {
            for (corner, p) in col.iter().enumerate() {
                let key = CornerKey {
                    marker: model.marker,
                    column,
                    corner,
                };
                let mut jitter = |u: Vec2| {
                    if sigma > 0.0 {
                        u + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng))
                    } else {
                        u
                    }
                };
                if let Some(u) = observe(&k, &pose, p) {
                    f.left.insert(key, jitter(u));
                }
                if let Some(u) = observe(&k, &rig.left_to_right.compose(&pose), p) {
                    f.right.insert(key, jitter(u));
                }
            }
        }
        frames.push(f);
        poses.push(pose);
    }
    (frames, rig, poses)
}
