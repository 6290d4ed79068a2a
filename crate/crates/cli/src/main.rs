#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod files;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cylindertag::generator::{generate, GenConfig};
use cylindertag::layout::{ideal_cylinder_model, layout_marker, render_pattern, LayoutParams, MarkerLayout};
use cylindertag::metrics::{EvalCounts, LOCATION_GATE_PX};
use cylindertag::pose::{reconstruct, solve_pnp, ObjectModel};
use cylindertag::synth::{
    cr_noise_simulation, negative_image, render_scene, scene_pose, Background, GroundTruth, PoseSampler, SceneConfig,
    NEGATIVE_KINDS,
};
use cylindertag::{CameraIntrinsics, Detector, DetectorConfig, Dictionary, GrayImage, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "cylindertag", version, about = "Cylindrical fiducial markers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a marker dictionary.
    Generate(GenerateArgs),
    /// Render a printable pattern and its 3D corner model.
    Render(RenderArgs),
    /// Render a synthetic camera image with ground truth.
    Synth(SynthArgs),
    /// Detect and decode markers in PGM images.
    Detect(DetectArgs),
    /// Estimate marker poses from detections.
    Pose(PoseArgs),
    /// Reconstruct a corner model from stereo frames.
    Reconstruct(ReconstructArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Cross-ratio spread along a line under corner noise.
    Crsim(CrsimArgs),
    /// Time the detector on synthetic frames.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 1000)]
    markers: usize,
    #[arg(long, default_value_t = 12)]
    columns: usize,
    #[arg(long, default_value_t = 2)]
    field: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct MarkerArgs {
    #[arg(long)]
    dict: PathBuf,
    #[arg(long, default_value_t = 0)]
    id: u32,
    /// Marker height in mm.
    #[arg(long, default_value_t = 60.0)]
    height: f64,
    /// Cylinder radius in mm.
    #[arg(long, default_value_t = 25.0)]
    radius: f64,
}

impl MarkerArgs {
    fn layout(&self) -> Result<(Dictionary, MarkerLayout)> {
        let dict = load_dictionary(&self.dict)?;
        let marker = dict
            .marker(self.id)
            .with_context(|| format!("dictionary has no marker {}", self.id))?;
        let layout = layout_marker(marker, &LayoutParams::new(self.height, self.radius))?;
        Ok((dict, layout))
    }
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    marker: MarkerArgs,
    #[arg(long, default_value_t = 300.0)]
    dpi: f64,
    /// Output pattern image (PGM).
    #[arg(long)]
    pattern: PathBuf,
    /// Output corner model.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackgroundArg {
    Flat,
    Clutter,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    marker: Option<MarkerArgs>,
    /// Write a marker-free image instead of a scene.
    #[arg(long, conflicts_with_all = ["dict", "gt"])]
    negative: bool,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pitch: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    roll: f64,
    /// Camera to cylinder-centre distance in mm.
    #[arg(long, default_value_t = 400.0)]
    distance: f64,
    /// Draw the pose at random from the seed instead.
    #[arg(long)]
    random_pose: bool,
    /// Camera intrinsics file; defaults to a 2400 px, 1920×1200 camera.
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    #[arg(long, default_value_t = 1920)]
    width: usize,
    #[arg(long, default_value_t = 1200)]
    height_px: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    blur: f64,
    #[arg(long, value_enum, default_value_t = BackgroundArg::Flat)]
    background: BackgroundArg,
    #[arg(long, default_value_t = 4)]
    supersample: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
    /// Ground-truth output.
    #[arg(long)]
    gt: Option<PathBuf>,
}

/// Flags overriding keys of the configuration file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    t_cost: Option<f64>,
    #[arg(long)]
    t_line: Option<f64>,
    #[arg(long)]
    t_rac: Option<f64>,
    /// Pairing and organisation angle tolerance, degrees.
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    alpha_gap: Option<f64>,
    #[arg(long)]
    alpha_len: Option<f64>,
    #[arg(long)]
    alpha_s: Option<f64>,
    #[arg(long)]
    t_ver: Option<f64>,
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    downsample_min_side: Option<usize>,
}

impl Overrides {
    fn apply(&self, c: &mut DetectorConfig) {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.fit.t_cost, self.t_cost);
        set(&mut c.fit.t_line, self.t_line);
        set(&mut c.fit.t_rac, self.t_rac);
        set(&mut c.pairing.theta, self.theta);
        set(&mut c.organize.theta, self.theta);
        set(&mut c.pairing.alpha_gap, self.alpha_gap);
        set(&mut c.pairing.alpha_len, self.alpha_len);
        set(&mut c.pairing.alpha_s, self.alpha_s);
        set(&mut c.organize.t_ver, self.t_ver);
        if self.no_refine {
            c.refine = false;
        }
        if let Some(v) = self.downsample_min_side {
            c.downsample_min_side = v;
        }
    }
}

#[derive(Args)]
struct DetectArgs {
    #[arg(required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    dict: PathBuf,
    /// With distortion terms, corners are written undistorted.
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Threshold configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PoseArgs {
    detections: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    intrinsics: PathBuf,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Stereo frame files, each with `# left` and `# right` sections.
    #[arg(required = true)]
    frames: Vec<PathBuf>,
    #[arg(long)]
    rig: PathBuf,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    detections: PathBuf,
    /// Directory holding `<image stem>.gt` files; images without one are
    /// marker-free.
    #[arg(long)]
    gt_dir: PathBuf,
    /// Fully visible columns a marker needs to count as present.
    #[arg(long, default_value_t = 3)]
    min_columns: usize,
    /// Width of the distance buckets in mm.
    #[arg(long, default_value_t = 100.0)]
    bucket: f64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CrsimArgs {
    #[arg(long, default_value_t = 100.0)]
    length: f64,
    #[arg(long, default_value_t = 20.0)]
    bc: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 20000)]
    trials: usize,
    #[arg(long, default_value_t = 41)]
    positions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    dict: PathBuf,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_dictionary(path: &Path) -> Result<Dictionary> {
    let text = read(path)?;
    Dictionary::from_text(&text).with_context(|| format!("{}", path.display()))
}

fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = read(path)?;
    text.trim().parse().with_context(|| format!("{}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let g = generate(&GenConfig::new(a.markers, a.columns, a.field, a.seed)?)?;
    if !g.complete {
        eprintln!("warning: generated {} of {} markers", g.dictionary.len(), a.markers);
    }
    emit(Some(&a.out), &g.dictionary.to_text())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let (_, layout) = a.marker.layout()?;
    render_pattern(&layout, a.dpi)?.save(&a.pattern)?;
    emit(Some(&a.model), &ideal_cylinder_model(&layout).to_text())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    if a.negative {
        let kind = NEGATIVE_KINDS[(a.seed % NEGATIVE_KINDS.len() as u64) as usize];
        negative_image(kind, a.width, a.height_px, &mut rng).save(&a.out)?;
        return Ok(());
    }
    let Some(marker) = &a.marker else {
        bail!("synth needs --dict unless --negative is given")
    };
    let (_, layout) = marker.layout()?;
    let mut cfg = SceneConfig::new(layout.radius, scene_pose(0.0, 0.0, 0.0, Vec3::zeros(), layout.height));
    if let Some(p) = &a.intrinsics {
        cfg.intrinsics = load_intrinsics(p)?;
    }
    cfg.width = a.width;
    cfg.height = a.height_px;
    cfg.noise_sigma = a.noise;
    cfg.blur_sigma = a.blur;
    cfg.supersample = a.supersample;
    cfg.seed = a.seed;
    cfg.background = match a.background {
        BackgroundArg::Flat => Background::Flat(128),
        BackgroundArg::Clutter => Background::Clutter,
    };
    cfg.pose = if a.random_pose {
        PoseSampler::default().sample(&mut rng, &layout, &cfg)
    } else {
        let c = Vec3::new(0.0, 0.0, a.distance);
        scene_pose(a.yaw, a.pitch, a.roll, c, layout.height)
    };
    let (img, gt) = render_scene(&layout, &cfg)?;
    img.save(&a.out)?;
    if let Some(p) = &a.gt {
        emit(Some(p), &gt.to_text())?;
    }
    Ok(())
}

fn cmd_detect(a: &DetectArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => DetectorConfig::from_toml(&read(p)?).with_context(|| format!("{}", p.display()))?,
        None => DetectorConfig::default(),
    };
    a.overrides.apply(&mut cfg);
    cfg.validate()?;
    let mut det = Detector::new(load_dictionary(&a.dict)?, cfg);
    if let Some(p) = &a.intrinsics {
        det = det.with_intrinsics(load_intrinsics(p)?);
    }
    let mut out = String::new();
    for path in &a.images {
        let img = GrayImage::load(path).with_context(|| format!("{}", path.display()))?;
        let name = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        files::write_image_block(&mut out, &name, &det.detect(&img));
    }
    emit(a.out.as_deref(), &out)
}

fn cmd_pose(a: &PoseArgs) -> Result<()> {
    let k = load_intrinsics(&a.intrinsics)?.undistorted();
    let model = ObjectModel::from_text(&read(&a.model)?)?;
    let mut out = String::new();
    for (name, dets) in files::read_detection_file(&read(&a.detections)?)? {
        let _ = writeln!(out, "{}{name}", files::IMAGE_HEADER);
        for d in &dets {
            match solve_pnp(&model.correspondences(d), &k) {
                Ok(est) => {
                    let _ = writeln!(out, "{} {}", d.id, est.to_line());
                }
                Err(e) => eprintln!("warning: {name}: marker {}: {e}", d.id),
            }
        }
    }
    emit(a.out.as_deref(), &out)
}

fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let rig = files::read_rig(&read(&a.rig)?)?;
    let frames = a
        .frames
        .iter()
        .map(|p| files::read_stereo_frame(&read(p)?).with_context(|| format!("{}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let r = reconstruct(&frames, &rig)?;
    eprintln!(
        "rms {:.4} px after {} rounds, {} points",
        r.rms,
        r.rounds,
        r.model.points.len()
    );
    emit(a.out.as_deref(), &r.model.to_text())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if !(a.bucket > 0.0) {
        bail!("--bucket must be positive");
    }
    let images = files::read_detection_file(&read(&a.detections)?)?;
    let mut buckets: std::collections::BTreeMap<i64, (usize, EvalCounts)> = Default::default();
    let mut all = (0usize, EvalCounts::default());
    let present = |g: &GroundTruth| g.visible_columns().len() >= a.min_columns;
    for (name, dets) in &images {
        let stem = Path::new(name)
            .file_stem()
            .map_or(name.clone(), |s| s.to_string_lossy().into_owned());
        let gt_path = a.gt_dir.join(format!("{stem}.gt"));
        let truths = match fs::read_to_string(&gt_path) {
            Ok(t) => vec![GroundTruth::from_text(&t).with_context(|| format!("{}", gt_path.display()))?],
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => vec![],
            Err(e) => return Err(e).with_context(|| format!("cannot read {}", gt_path.display())),
        };
        // marker-free images fall in bucket -1
        let key = truths
            .first()
            .map_or(-1, |g| (g.pose.translation.norm() / a.bucket).floor() as i64);
        let b = buckets.entry(key).or_default();
        b.0 += 1;
        b.1.add_image(dets, &truths, LOCATION_GATE_PX, present);
        all.0 += 1;
        all.1.add_image(dets, &truths, LOCATION_GATE_PX, present);
    }
    let mut out = String::from("bucket,images,tp,fp,fn,precision,recall,precision_defined\n");
    let mut row = |label: String, (n, c): (usize, EvalCounts)| {
        let r = c.rates();
        let _ = writeln!(
            out,
            "{label},{n},{},{},{},{:.4},{:.4},{}",
            c.tp, c.fp, c.fn_, r.precision, r.recall, r.precision_defined
        );
    };
    for (key, v) in buckets {
        let label = if key < 0 {
            "negative".to_string()
        } else {
            format!("{}-{}mm", key as f64 * a.bucket, (key + 1) as f64 * a.bucket)
        };
        row(label, v);
    }
    row("all".to_string(), all);
    emit(a.out.as_deref(), &out)
}

fn cmd_crsim(a: &CrsimArgs) -> Result<()> {
    let samples = cr_noise_simulation(a.length, a.bc, a.sigma, a.trials, a.positions, a.seed)?;
    let mut out = String::from("position,std\n");
    for s in samples {
        let _ = writeln!(out, "{:.4},{:.6e}", s.position, s.std);
    }
    emit(a.out.as_deref(), &out)
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    if a.frames == 0 {
        bail!("--frames must be positive");
    }
    let dict = load_dictionary(&a.dict)?;
    let det = Detector::new(dict.clone(), DetectorConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let sampler = PoseSampler::default();
    let mut times = Vec::with_capacity(a.frames);
    let mut found = 0;
    for i in 0..a.frames {
        let marker = &dict.markers()[i % dict.len()];
        let layout = layout_marker(marker, &LayoutParams::default())?;
        let mut cfg = SceneConfig::new(layout.radius, scene_pose(0.0, 0.0, 0.0, Vec3::zeros(), layout.height));
        cfg.noise_sigma = a.noise;
        cfg.supersample = 2;
        cfg.seed = a.seed.wrapping_add(i as u64);
        cfg.pose = sampler.sample(&mut rng, &layout, &cfg);
        let (img, _) = render_scene(&layout, &cfg)?;
        let t = Instant::now();
        let dets = det.detect(&img);
        times.push(t.elapsed().as_secs_f64() * 1e3);
        found += dets.iter().any(|d| d.id == marker.id) as usize;
    }
    times.sort_by(f64::total_cmp);
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    println!("frames {} ({}x{})", a.frames, 1920, 1200);
    println!("detect median {:.2} ms", times[times.len() / 2]);
    println!("detect mean {mean:.2} ms");
    println!("detect max {:.2} ms", times[times.len() - 1]);
    println!("decoded {found}/{}", a.frames);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Render(a) => cmd_render(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Pose(a) => cmd_pose(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Crsim(a) => cmd_crsim(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
