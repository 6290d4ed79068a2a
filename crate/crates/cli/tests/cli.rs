use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cylindertag::geometry::{pose_delta, project};
use cylindertag::pose::{aligned_rmse, ObjectModel, PoseEstimate};
use cylindertag::synth::GroundTruth;
use cylindertag::{CameraIntrinsics, RigidTransform, Vec3};
use tempfile::TempDir;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cylindertag"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = cli(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn setup() -> TempDir {
    let t = TempDir::new().unwrap();
    ok(
        t.path(),
        &[
            "generate",
            "--markers",
            "20",
            "--columns",
            "12",
            "--field",
            "2",
            "--seed",
            "3",
            "-o",
            "dict.txt",
        ],
    );
    fs::write(t.path().join("k.txt"), "2400 2400 960 600\n").unwrap();
    t
}

#[test]
fn generate_render_synth_detect_pose_round_trip() {
    let t = setup();
    let d = t.path();
    ok(
        d,
        &[
            "render",
            "--dict",
            "dict.txt",
            "--id",
            "5",
            "--pattern",
            "pattern.pgm",
            "--model",
            "model.txt",
        ],
    );
    ok(
        d,
        &[
            "synth",
            "--dict",
            "dict.txt",
            "--id",
            "5",
            "--yaw",
            "-25",
            "--pitch",
            "15",
            "--roll",
            "40",
            "--distance",
            "500",
            "--noise",
            "2",
            "--seed",
            "7",
            "-o",
            "scene.pgm",
            "--gt",
            "scene.gt",
        ],
    );
    ok(
        d,
        &[
            "detect",
            "scene.pgm",
            "--dict",
            "dict.txt",
            "--intrinsics",
            "k.txt",
            "-o",
            "det.txt",
        ],
    );
    let poses = ok(d, &["pose", "det.txt", "--model", "model.txt", "--intrinsics", "k.txt"]);
    let gt = GroundTruth::from_text(&fs::read_to_string(d.join("scene.gt")).unwrap()).unwrap();
    let line = poses.lines().find(|l| !l.starts_with('#')).expect("one pose");
    let (id, rest) = line.split_once(' ').unwrap();
    assert_eq!(id, "5");
    let (pose, rms) = PoseEstimate::from_line(rest).unwrap();
    let (rot, trans) = pose_delta(&pose, &gt.pose);
    assert!(rot < 0.5 && trans < 2.0, "rot {rot} trans {trans}");
    assert!(rms < 1.0);
}

#[test]
fn unknown_flag_fails_with_usage() {
    let t = TempDir::new().unwrap();
    let o = cli(t.path(), &["detect", "--no-such-flag"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error:") && err.contains("Usage"));
}

#[test]
fn errors_are_one_line() {
    let t = setup();
    let o = cli(t.path(), &["detect", "absent.pgm", "--dict", "dict.txt"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: "));
}

#[test]
fn negative_image_gives_empty_detections() {
    let t = setup();
    for seed in ["0", "1", "2", "3", "4"] {
        let name = format!("neg{seed}.pgm");
        ok(t.path(), &["synth", "--negative", "--seed", seed, "-o", &name]);
        let out = ok(t.path(), &["detect", &name, "--dict", "dict.txt"]);
        assert_eq!(out, format!("# image {name}\n"));
    }
}

#[test]
fn config_file_and_overrides() {
    let t = setup();
    let d = t.path();
    ok(
        d,
        &[
            "synth",
            "--dict",
            "dict.txt",
            "--id",
            "2",
            "--distance",
            "450",
            "--yaw",
            "10",
            "-o",
            "s.pgm",
        ],
    );
    fs::write(d.join("cfg.toml"), "refine = false\n[fit]\nt_line = 1.8\n").unwrap();
    let out = ok(
        d,
        &[
            "detect", "s.pgm", "--dict", "dict.txt", "--config", "cfg.toml", "--t-rac", "0.3",
        ],
    );
    assert!(out.lines().any(|l| l.starts_with("2 ")));
    fs::write(d.join("bad.toml"), "[fit]\nt_lime = 1.8\n").unwrap();
    assert!(
        !cli(d, &["detect", "s.pgm", "--dict", "dict.txt", "--config", "bad.toml"])
            .status
            .success()
    );
    assert!(!cli(d, &["detect", "s.pgm", "--dict", "dict.txt", "--t-line", "-1"])
        .status
        .success());
}

#[test]
fn crsim_peaks_in_the_middle() {
    let t = TempDir::new().unwrap();
    let out = ok(
        t.path(),
        &["crsim", "--trials", "20000", "--positions", "9", "--seed", "1"],
    );
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("position,std"));
    let std: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(std.len(), 9);
    assert!(std[4] > std[0] && std[4] > std[8]);
}

#[test]
fn eval_scores_buckets() {
    let t = setup();
    let d = t.path();
    ok(
        d,
        &[
            "synth",
            "--dict",
            "dict.txt",
            "--id",
            "1",
            "--distance",
            "420",
            "-o",
            "a.pgm",
            "--gt",
            "a.gt",
        ],
    );
    ok(d, &["synth", "--negative", "--seed", "9", "-o", "n.pgm"]);
    ok(d, &["detect", "a.pgm", "n.pgm", "--dict", "dict.txt", "-o", "det.txt"]);
    let csv = ok(d, &["eval", "det.txt", "--gt-dir", "."]);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "bucket,images,tp,fp,fn,precision,recall,precision_defined");
    assert!(rows.contains(&"negative,1,0,0,0,1.0000,1.0000,false"));
    assert!(rows.contains(&"all,2,1,0,0,1.0000,1.0000,true"), "{csv}");
    assert!(rows.iter().any(|r| r.starts_with("400-500mm,1,1,0,0")));
}

/// Ideal-model corners seen from `cam`, as detection blocks.
fn view(model: &ObjectModel, k: &CameraIntrinsics, cam: &RigidTransform) -> String {
    let mut cols: std::collections::BTreeMap<usize, Vec<(f64, f64)>> = Default::default();
    for (key, p) in &model.points {
        let pc = cam.apply(p);
        let n = cam.rotation * Vec3::new(p.x, 0.0, p.z).normalize();
        if n.dot(&pc.normalize()) >= -0.05 {
            continue;
        }
        let q = project(k, cam, p).unwrap();
        cols.entry(key.column).or_default().push((q.x, q.y));
    }
    let marker = model.points.keys().next().unwrap().marker;
    let mut s = format!("{marker} forward 1.0\n");
    for (c, pts) in cols.iter().filter(|(_, p)| p.len() == 8) {
        for (i, (u, v)) in pts.iter().enumerate() {
            let _ = writeln!(s, "{c} {i} {u:.6} {v:.6}");
        }
    }
    s
}

#[test]
fn reconstruct_recovers_the_model() {
    let t = setup();
    let d = t.path();
    ok(
        d,
        &[
            "render",
            "--dict",
            "dict.txt",
            "--id",
            "0",
            "--pattern",
            "p.pgm",
            "--model",
            "model.txt",
        ],
    );
    let model = ObjectModel::from_text(&fs::read_to_string(d.join("model.txt")).unwrap()).unwrap();
    let k: CameraIntrinsics = "2400 2400 960 600".parse().unwrap();
    let rig = RigidTransform::from_axis_angle(Vec3::y(), -0.08, Vec3::new(-120.0, 0.0, 5.0));
    fs::write(d.join("rig.txt"), {
        let q = rig.rotation.quaternion();
        let t = rig.translation;
        format!(
            "2400 2400 960 600\n{} {} {} {} {} {} {}\n",
            q.w, q.i, q.j, q.k, t.x, t.y, t.z
        )
    })
    .unwrap();
    let mut args = vec![
        "reconstruct".to_string(),
        "--rig".into(),
        "rig.txt".into(),
        "-o".into(),
        "out.txt".into(),
    ];
    for i in 0..12 {
        let yaw = 360.0 * i as f64 / 12.0;
        let pose = cylindertag::synth::scene_pose(yaw, 10.0, 5.0, Vec3::new(60.0, 0.0, 450.0), 60.0);
        let text = format!(
            "# left\n{}# right\n{}",
            view(&model, &k, &pose),
            view(&model, &k, &rig.compose(&pose))
        );
        let name = format!("f{i}.txt");
        fs::write(d.join(&name), text).unwrap();
        args.push(name);
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(d, &args);
    let rec = ObjectModel::from_text(&fs::read_to_string(d.join("out.txt")).unwrap()).unwrap();
    let (a, b): (Vec<Vec3>, Vec<Vec3>) = rec.points.iter().map(|(key, p)| (*p, model.points[key])).unzip();
    assert_eq!(a.len(), model.points.len());
    assert!(aligned_rmse(&a, &b).unwrap() < 1e-3);
}
