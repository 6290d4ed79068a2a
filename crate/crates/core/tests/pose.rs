mod common;

use cylindertag::geometry::{pose_delta, CameraIntrinsics, RigidTransform, Vec2, Vec3};
use cylindertag::pose::{
    aligned_rmse, perturb, reconstruct, refine_pose, reprojection_jacobian, solve_pnp, solve_pnp_with, Correspondence,
    ObjectModel, PnpOptions, PoseError, Provenance,
};
use cylindertag::synth::{render_scene, scene_pose, SceneConfig};
use cylindertag::{Detector, DetectorConfig};
use nalgebra::{UnitQuaternion, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_pose(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let angle = rng.random_range(-1.0..1.0);
    let t = Vec3::new(
        rng.random_range(-40.0..40.0),
        rng.random_range(-40.0..40.0),
        rng.random_range(300.0..800.0),
    );
    RigidTransform::from_axis_angle(axis, angle, t)
}

/// Exact pinhole projection written out by hand.
fn project(k: &CameraIntrinsics, t: &RigidTransform, p: &Vec3) -> Vec2 {
    let r = t.rotation_matrix();
    let x = r[(0, 0)] * p.x + r[(0, 1)] * p.y + r[(0, 2)] * p.z + t.translation.x;
    let y = r[(1, 0)] * p.x + r[(1, 1)] * p.y + r[(1, 2)] * p.z + t.translation.y;
    let z = r[(2, 0)] * p.x + r[(2, 1)] * p.y + r[(2, 2)] * p.z + t.translation.z;
    Vec2::new(k.fx * x / z + k.cx, k.fy * y / z + k.cy)
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
            )
        })
        .collect()
}

#[test]
fn noiseless_pnp_recovers_the_pose() {
    let k = common::camera();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let truth = random_pose(&mut rng);
        let c: Vec<Correspondence> = cloud(&mut rng, 12)
            .into_iter()
            .map(|p| Correspondence {
                model: p,
                image: project(&k, &truth, &p),
            })
            .collect();
        let est = solve_pnp(&c, &k).unwrap();
        assert!(est.pose.rotation.angle_to(&truth.rotation) < 1e-6);
        assert!((est.pose.translation - truth.translation).norm() < 1e-6);
        assert_eq!(est.residuals.len(), 12);
    }
}

#[test]
fn five_points_are_not_enough() {
    let k = common::camera();
    let c = vec![
        Correspondence {
            model: Vec3::zeros(),
            image: Vec2::zeros()
        };
        5
    ];
    assert_eq!(
        solve_pnp(&c, &k).unwrap_err(),
        PoseError::TooFewPoints { need: 6, got: 5 }
    );
}

#[test]
fn coplanar_points_are_degenerate_for_dlt() {
    let k = common::camera();
    let truth = RigidTransform::from_axis_angle(Vec3::x(), 0.3, Vec3::new(0.0, 0.0, 500.0));
    let c: Vec<Correspondence> = (0..8)
        .map(|i| {
            let p = Vec3::new((i % 4) as f64 * 10.0, (i / 4) as f64 * 15.0 + (i % 3) as f64, 0.0);
            Correspondence {
                model: p,
                image: project(&k, &truth, &p),
            }
        })
        .collect();
    assert_eq!(solve_pnp(&c, &k).unwrap_err(), PoseError::Degenerate);
}

#[test]
fn noisy_pnp_rotation_error_is_small() {
    let k = CameraIntrinsics::new(1400.0, 1400.0, 960.0, 600.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let dict = common::dictionary_12c2f();
    let model = common::ideal_model(&dict, 0);
    let mut errors = Vec::new();
    for _ in 0..100 {
        let yaw = rng.random_range(-30.0..30.0);
        let truth = scene_pose(yaw, 10.0, 0.0, Vec3::new(0.0, 0.0, 500.0), model.height);
        let c: Vec<Correspondence> = model
            .corners
            .iter()
            .flatten()
            .filter(|p| common::observe(&k, &truth, p).is_some())
            .take(24)
            .map(|p| Correspondence {
                model: *p,
                image: project(&k, &truth, p) + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng)),
            })
            .collect();
        assert_eq!(c.len(), 24);
        let est = solve_pnp(&c, &k).unwrap();
        errors.push(pose_delta(&est.pose, &truth).0);
    }
    errors.sort_by(f64::total_cmp);
    assert!(errors[50] < 0.2, "median rotation error {:.3}°", errors[50]);
}

#[test]
fn cost_does_not_increase_with_iterations() {
    let k = common::camera();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 2.0).unwrap();
    let truth = random_pose(&mut rng);
    let c: Vec<Correspondence> = cloud(&mut rng, 20)
        .into_iter()
        .map(|p| Correspondence {
            model: p,
            image: project(&k, &truth, &p) + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng)),
        })
        .collect();
    let init = perturb(&truth, &Vector6::new(0.1, -0.05, 0.08, 10.0, -5.0, 20.0));
    let mut last = f64::INFINITY;
    for iters in 0..10 {
        let opts = PnpOptions {
            max_iterations: iters,
            ..PnpOptions::default()
        };
        let rms = refine_pose(&c, &k, &init, &opts).unwrap().rms;
        assert!(rms <= last + 1e-12, "{iters} iterations: {rms} > {last}");
        last = rms;
    }
}

#[test]
fn four_coplanar_corners_refine_from_a_guess() {
    let k = common::camera();
    let dict = common::dictionary_12c2f();
    let model = common::ideal_model(&dict, 3);
    let truth = scene_pose(5.0, 10.0, 20.0, Vec3::new(0.0, 0.0, 450.0), model.height);
    let c: Vec<Correspondence> = model.corners[0][..4]
        .iter()
        .map(|p| Correspondence {
            model: *p,
            image: project(&k, &truth, p),
        })
        .collect();
    let init = perturb(&truth, &Vector6::new(0.02, -0.01, 0.02, 2.0, -1.0, 5.0));
    let est = refine_pose(&c, &k, &init, &PnpOptions::default()).unwrap();
    assert!(est.rms < 1e-6);
    assert!(refine_pose(&c[..2], &k, &init, &PnpOptions::default()).is_err());
}

#[test]
fn huber_weighting_resists_an_outlier() {
    let k = common::camera();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truth = random_pose(&mut rng);
    let mut c: Vec<Correspondence> = cloud(&mut rng, 16)
        .into_iter()
        .map(|p| Correspondence {
            model: p,
            image: project(&k, &truth, &p),
        })
        .collect();
    c[0].image += Vec2::new(40.0, -30.0);
    let plain = solve_pnp(&c, &k).unwrap();
    let robust = solve_pnp_with(
        &c,
        &k,
        &PnpOptions {
            huber: Some(1.0),
            max_iterations: 200,
            ..PnpOptions::default()
        },
    )
    .unwrap();
    let err = |e: &RigidTransform| (e.translation - truth.translation).norm();
    assert!(err(&robust.pose) < err(&plain.pose));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn jacobian_matches_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = CameraIntrinsics::new(rng.random_range(800.0..3000.0), rng.random_range(800.0..3000.0), 960.0, 600.0).unwrap();
        let pose = random_pose(&mut rng);
        let p = cloud(&mut rng, 1)[0];
        let j = reprojection_jacobian(&k, &pose, &p);
        let h = 1e-6;
        for a in 0..6 {
            let mut d = Vector6::zeros();
            d[a] = h;
            let fd = (project(&k, &perturb(&pose, &d), &p) - project(&k, &perturb(&pose, &(-d)), &p)) / (2.0 * h);
            let col = j.column(a).into_owned();
            prop_assert!((fd - col).norm() <= 1e-5 * col.norm().max(1e-3), "column {}: {:?} vs {:?}", a, fd, col);
        }
    }
}

#[test]
fn object_model_round_trip() {
    let dict = common::dictionary_12c2f();
    let m = ObjectModel::from_corner_model(&common::ideal_model(&dict, 2));
    assert_eq!(m.provenance, Provenance::Ideal);
    assert_eq!(m.points.len(), 12 * 8);
    let text = m.to_text();
    let back = ObjectModel::from_text(&text).unwrap();
    assert_eq!(back.to_text(), text);
    for (k, p) in &m.points {
        assert!((back.points[k] - p).norm() < 1e-6);
    }
}

#[test]
fn object_model_rejects_bad_headers() {
    assert!(ObjectModel::from_text("0 0 0 1.0 2.0 3.0\n").is_err());
    assert!(ObjectModel::from_text("cylindertag-object v9 provenance=ideal\n").is_err());
    assert!(ObjectModel::from_text("").is_err());
}

#[test]
fn layout_model_file_loads_as_ideal_object() {
    let dict = common::dictionary_12c2f();
    let text = common::ideal_model(&dict, 4).to_text();
    let m = ObjectModel::from_text(&text).unwrap();
    assert_eq!(m.provenance, Provenance::Ideal);
    assert_eq!(m.points.len(), 96);
}

#[test]
fn ideal_model_solves_against_detected_corners() {
    let dict = common::dictionary_12c2f();
    let layout = common::layout_of(&dict, 6);
    let model = ObjectModel::from_corner_model(&common::ideal_model(&dict, 6));
    let truth = scene_pose(20.0, -15.0, 10.0, Vec3::new(10.0, 5.0, 420.0), layout.height);
    let (img, _) = render_scene(&layout, &SceneConfig::new(layout.radius, truth)).unwrap();
    let det = Detector::new(dict.clone(), DetectorConfig::default());
    let found = det.detect(&img);
    assert_eq!(found.len(), 1);
    let c = model.correspondences(&found[0]);
    assert!(c.len() >= 24);
    let est = solve_pnp(&c, &common::camera()).unwrap();
    let (rot, trans) = pose_delta(&est.pose, &truth);
    assert!(rot < 0.5 && trans < 2.0, "{rot:.3}° {trans:.3} mm");
    assert!(est.rms < 0.5);
}

#[test]
fn reconstruction_needs_two_frames() {
    let dict = common::dictionary_12c2f();
    let (frames, rig, _) = common::stereo_frames(&common::ideal_model(&dict, 1), 1, 0.0, 1);
    assert!(matches!(
        reconstruct(&frames, &rig),
        Err(PoseError::TooFewFrames { .. })
    ));
}

fn truth_points(
    model: &cylindertag::layout::CornerModel,
    frame0: &RigidTransform,
    rec: &ObjectModel,
) -> (Vec<Vec3>, Vec<Vec3>) {
    rec.points
        .iter()
        .map(|(k, p)| (*p, frame0.apply(&model.corners[k.column][k.corner])))
        .unzip()
}

#[test]
fn noiseless_reconstruction_is_exact() {
    let dict = common::dictionary_12c2f();
    let model = common::ideal_model(&dict, 1);
    let (frames, rig, poses) = common::stereo_frames(&model, 20, 0.0, 2);
    let rec = reconstruct(&frames, &rig).unwrap();
    assert_eq!(rec.model.points.len(), 96);
    let (a, b) = truth_points(&model, &poses[0], &rec.model);
    // frame 0's camera is the gauge, so the points match without alignment
    let direct = (a.iter().zip(&b).map(|(p, q)| (p - q).norm_squared()).sum::<f64>() / a.len() as f64).sqrt();
    assert!(direct < 1e-4, "rmse {direct}");
    assert!(aligned_rmse(&a, &b).unwrap() < 1e-4);
    assert!(rec.rms < 1e-6);
    assert_eq!(rec.poses[0], RigidTransform::identity());
}

#[test]
fn noisy_reconstruction_error_is_near_the_noise_level() {
    let dict = common::dictionary_12c2f();
    let model = common::ideal_model(&dict, 1);
    let (frames, rig, _) = common::stereo_frames(&model, 20, 0.1, 3);
    let rec = reconstruct(&frames, &rig).unwrap();
    assert!((0.05..=0.35).contains(&rec.rms), "rms {}", rec.rms);
    assert_eq!(rec.corner_rms.len(), rec.model.points.len());
}

#[test]
fn reconstruction_is_independent_of_the_world_frame() {
    let dict = common::dictionary_12c2f();
    let model = common::ideal_model(&dict, 5);
    let (frames, rig, _) = common::stereo_frames(&model, 8, 0.0, 4);
    let rec = reconstruct(&frames, &rig).unwrap();
    // the same views of a rigidly moved model give the same shape
    let g = RigidTransform::new(
        UnitQuaternion::from_euler_angles(0.3, -0.2, 0.5),
        Vec3::new(5.0, -8.0, 3.0),
    );
    let moved = cylindertag::layout::CornerModel {
        corners: model.corners.iter().map(|c| c.map(|p| g.apply(&p))).collect(),
        ..model.clone()
    };
    let (frames2, _, _) = common::stereo_frames(&moved, 8, 0.0, 4);
    let rec2 = reconstruct(&frames2, &rig).unwrap();
    let keys: Vec<_> = rec
        .model
        .points
        .keys()
        .filter(|k| rec2.model.points.contains_key(k))
        .copied()
        .collect();
    let a: Vec<Vec3> = keys.iter().map(|k| rec.model.points[k]).collect();
    let b: Vec<Vec3> = keys.iter().map(|k| rec2.model.points[k]).collect();
    assert!(keys.len() >= 48);
    assert!(aligned_rmse(&a, &b).unwrap() < 1e-4);
}
