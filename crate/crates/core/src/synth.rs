//! Synthetic scenes with exact ground truth: a marker wrapped on a cylinder,
//! ray-cast through a pinhole camera with supersampled coverage.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{cross_ratio_euclidean, project, CameraIntrinsics, RigidTransform, Vec2, Vec3};
use crate::imgproc::GrayImage;
use crate::layout::{ideal_cylinder_model, MarkerLayout};

pub const BLACK: f64 = 25.0;
pub const WHITE: f64 = 230.0;
pub const GT_MAGIC: &str = "cylindertag-gt v1";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cylinder is behind the camera")]
    BehindCamera,
    #[error("invalid scene: {0}")]
    InvalidConfig(String),
    #[error("malformed ground truth: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Background {
    Flat(u8),
    Clutter,
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    /// Cylinder radius in mm; normally the layout's own radius.
    pub radius: f64,
    /// Object-to-camera transform.
    pub pose: RigidTransform,
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub supersample: usize,
    /// Gaussian noise in gray levels.
    pub noise_sigma: f64,
    /// Gaussian blur in pixels (0 disables).
    pub blur_sigma: f64,
    pub background: Background,
    /// White surface kept above and below the pattern, as a fraction of its height.
    pub margin: f64,
    pub seed: u64,
}

impl SceneConfig {
    /// Default camera (1920×1200, f = 2400 px) looking at `pose`.
    pub fn new(radius: f64, pose: RigidTransform) -> Self {
        Self {
            radius,
            pose,
            intrinsics: CameraIntrinsics::new(2400.0, 2400.0, 960.0, 600.0).expect("valid"),
            width: 1920,
            height: 1200,
            supersample: 4,
            noise_sigma: 0.0,
            blur_sigma: 0.0,
            background: Background::Flat(128),
            margin: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerTruth {
    pub pos: Vec2,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub marker: u32,
    pub pose: RigidTransform,
    /// `corners[j][k]`: corner `k` of column `j`.
    pub corners: Vec<[CornerTruth; 8]>,
}

impl GroundTruth {
    /// Columns whose eight corners are all visible.
    pub fn visible_columns(&self) -> Vec<usize> {
        (0..self.corners.len())
            .filter(|&j| self.corners[j].iter().all(|c| c.visible))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let q = self.pose.rotation.quaternion();
        let t = self.pose.translation;
        let mut s = format!("# {GT_MAGIC} marker={}\n", self.marker);
        let _ = writeln!(
            s,
            "# pose {:.9} {:.9} {:.9} {:.9} {:.6} {:.6} {:.6}",
            q.w, q.i, q.j, q.k, t.x, t.y, t.z
        );
        for (j, col) in self.corners.iter().enumerate() {
            for (k, c) in col.iter().enumerate() {
                let _ = writeln!(s, "{j} {k} {:.6} {:.6} {}", c.pos.x, c.pos.y, c.visible as u8);
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, SynthError> {
        let bad = |m: &str| SynthError::Parse(m.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        let marker = header
            .strip_prefix("# ")
            .and_then(|h| h.strip_prefix(GT_MAGIC))
            .and_then(|h| h.trim().strip_prefix("marker="))
            .ok_or_else(|| bad("missing header"))?
            .parse()
            .map_err(|_| bad("bad marker id"))?;
        let mut pose = RigidTransform::identity();
        let mut corners: Vec<[CornerTruth; 8]> = Vec::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(p) = line.strip_prefix("# pose") {
                let v = parse_floats(p).ok_or_else(|| bad("bad pose line"))?;
                let [qw, qx, qy, qz, tx, ty, tz] = v[..] else {
                    return Err(bad("bad pose line"));
                };
                let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(qw, qx, qy, qz));
                pose = RigidTransform::new(q, Vec3::new(tx, ty, tz));
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let v: Vec<&str> = line.split_whitespace().collect();
            let [j, k, u, vv, vis] = v[..] else {
                return Err(bad(line));
            };
            let j: usize = j.parse().map_err(|_| bad(line))?;
            let k: usize = k.parse().map_err(|_| bad(line))?;
            if k >= 8 {
                return Err(bad(line));
            }
            let pos = Vec2::new(u.parse().map_err(|_| bad(line))?, vv.parse().map_err(|_| bad(line))?);
            let visible = match vis {
                "0" => false,
                "1" => true,
                _ => return Err(bad(line)),
            };
            while corners.len() <= j {
                corners.push(
                    [CornerTruth {
                        pos: Vec2::zeros(),
                        visible: false,
                    }; 8],
                );
            }
            corners[j][k] = CornerTruth { pos, visible };
        }
        Ok(Self { marker, pose, corners })
    }
}

fn parse_floats(s: &str) -> Option<Vec<f64>> {
    s.split_whitespace().map(|t| t.parse().ok()).collect()
}

/// What a ray sees.
#[derive(Clone, Copy, PartialEq)]
enum Hit {
    Background,
    White,
    Black,
}

struct Caster<'a> {
    layout: &'a MarkerLayout,
    k: CameraIntrinsics,
    rot_t: nalgebra::Matrix3<f64>,
    origin: Vec3,
    radius: f64,
    y_range: (f64, f64),
    circumference: f64,
    pitch: f64,
}

impl Caster<'_> {
    fn cast(&self, px: f64, py: f64) -> Hit {
        let xn = self.k.pixel_to_normalized(&Vec2::new(px, py));
        let d = self.rot_t * Vector3::new(xn.x, xn.y, 1.0);
        let o = self.origin;
        // |(o + t d).xz| = r
        let a = d.x * d.x + d.z * d.z;
        let b = 2.0 * (o.x * d.x + o.z * d.z);
        let c = o.x * o.x + o.z * o.z - self.radius * self.radius;
        let disc = b * b - 4.0 * a * c;
        if a <= 0.0 || disc < 0.0 {
            return Hit::Background;
        }
        let t = (-b - disc.sqrt()) / (2.0 * a);
        if t <= 0.0 {
            return Hit::Background;
        }
        let p = o + d * t;
        if p.y < self.y_range.0 || p.y > self.y_range.1 {
            return Hit::Background;
        }
        let mut x = p.x.atan2(p.z) * self.radius;
        if x < 0.0 {
            x += self.circumference;
        }
        let j = (x / self.pitch) as usize;
        let Some(col) = self.layout.columns.get(j) else {
            return Hit::White;
        };
        let q = Vec2::new(x, p.y);
        if col.quads().iter().any(|quad| inside_convex(quad, q)) {
            Hit::Black
        } else {
            Hit::White
        }
    }
}

fn inside_convex(q: &[Vec2; 4], p: Vec2) -> bool {
    let mut pos = false;
    let mut neg = false;
    for i in 0..4 {
        let (a, b) = (q[i], q[(i + 1) % 4]);
        let c = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        pos |= c > 0.0;
        neg |= c < 0.0;
    }
    !(pos && neg)
}

/// Renders `layout` wrapped on the configured cylinder.
pub fn render_scene(layout: &MarkerLayout, cfg: &SceneConfig) -> Result<(GrayImage, GroundTruth), SynthError> {
    if cfg.supersample == 0 || cfg.width == 0 || cfg.height == 0 {
        return Err(SynthError::InvalidConfig("zero size or supersampling".into()));
    }
    if !(cfg.noise_sigma >= 0.0) || !(cfg.blur_sigma >= 0.0) || !(cfg.radius > 0.0) {
        return Err(SynthError::InvalidConfig("negative noise, blur or radius".into()));
    }
    let axis_mid = cfg.pose.apply(&Vec3::new(0.0, layout.height / 2.0, 0.0));
    if axis_mid.z <= cfg.radius {
        return Err(SynthError::BehindCamera);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bg = match cfg.background {
        Background::Flat(v) => GrayImage::new(cfg.width, cfg.height, v),
        Background::Clutter => clutter(cfg.width, cfg.height, &mut rng),
    };
    let inv = cfg.pose.inverse();
    let margin = cfg.margin * layout.height;
    let caster = Caster {
        layout,
        k: cfg.intrinsics,
        rot_t: inv.rotation_matrix(),
        origin: inv.translation,
        radius: cfg.radius,
        y_range: (-margin, layout.height + margin),
        circumference: TAU * cfg.radius,
        pitch: layout.pitch(),
    };
    let (w, h) = (cfg.width, cfg.height);
    let value = |hit: Hit, x: usize, y: usize| match hit {
        Hit::Background => bg.get(x, y) as f64,
        Hit::White => WHITE,
        Hit::Black => BLACK,
    };

    // pixel-corner grid; uniform pixels skip supersampling
    let (x0, y0, x1, y1) = footprint(layout, cfg, margin);
    let gw = x1 - x0 + 2;
    let mut grid = vec![Hit::Background; gw * (y1 - y0 + 2)];
    for gy in 0..=(y1 - y0 + 1) {
        for gx in 0..gw {
            grid[gy * gw + gx] = caster.cast((x0 + gx) as f64 - 0.5, (y0 + gy) as f64 - 0.5);
        }
    }
    let mut out = vec![0.0f64; w * h];
    let ss = cfg.supersample;
    for y in 0..h {
        for x in 0..w {
            let inside = (x0..=x1).contains(&x) && (y0..=y1).contains(&y);
            if !inside {
                out[y * w + x] = bg.get(x, y) as f64;
                continue;
            }
            let (gx, gy) = (x - x0, y - y0);
            let c = [
                grid[gy * gw + gx],
                grid[gy * gw + gx + 1],
                grid[(gy + 1) * gw + gx],
                grid[(gy + 1) * gw + gx + 1],
            ];
            let centre = caster.cast(x as f64, y as f64);
            out[y * w + x] = if c.iter().all(|v| *v == centre) {
                value(centre, x, y)
            } else {
                let mut acc = 0.0;
                for j in 0..ss {
                    for i in 0..ss {
                        let sx = x as f64 - 0.5 + (i as f64 + 0.5) / ss as f64;
                        let sy = y as f64 - 0.5 + (j as f64 + 0.5) / ss as f64;
                        acc += value(caster.cast(sx, sy), x, y);
                    }
                }
                acc / (ss * ss) as f64
            };
        }
    }
    if cfg.noise_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
        out.iter_mut().for_each(|v| *v += n.sample(&mut rng));
    }
    if cfg.blur_sigma > 0.0 {
        gaussian_blur(&mut out, w, h, cfg.blur_sigma);
    }
    let data = out.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let img = GrayImage::from_raw(w, h, data).expect("sized buffer");
    Ok((img, ground_truth(layout, cfg)))
}

/// Conservative pixel bounding box of the cylinder section.
fn footprint(layout: &MarkerLayout, cfg: &SceneConfig, margin: f64) -> (usize, usize, usize, usize) {
    let (mut lo, mut hi) = (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY));
    let r = cfg.radius * 1.01;
    for y in [-margin, layout.height + margin] {
        for k in 0..64 {
            let a = k as f64 / 64.0 * TAU;
            let p = Vec3::new(r * a.sin(), y, r * a.cos());
            match project(&cfg.intrinsics, &cfg.pose, &p) {
                Ok(uv) => {
                    lo = lo.inf(&uv);
                    hi = hi.sup(&uv);
                }
                Err(_) => return (0, 0, cfg.width - 1, cfg.height - 1),
            }
        }
    }
    // silhouette between sampled points bulges at most a few pixels
    let pad = 4.0;
    let clampx = |v: f64| v.clamp(0.0, (cfg.width - 1) as f64) as usize;
    let clampy = |v: f64| v.clamp(0.0, (cfg.height - 1) as f64) as usize;
    (
        clampx(lo.x - pad),
        clampy(lo.y - pad),
        clampx(hi.x + pad),
        clampy(hi.y + pad),
    )
}

fn ground_truth(layout: &MarkerLayout, cfg: &SceneConfig) -> GroundTruth {
    let mut scaled = layout.clone();
    scaled.radius = cfg.radius;
    let model = ideal_cylinder_model(&scaled);
    let rot = cfg.pose.rotation_matrix();
    let corners = model
        .corners
        .iter()
        .map(|col| {
            col.map(|p| {
                let pc = cfg.pose.apply(&p);
                let normal = rot * Vec3::new(p.x, 0.0, p.z).normalize();
                let facing = normal.dot(&pc.normalize()) < -0.05;
                match project(&cfg.intrinsics, &cfg.pose, &p) {
                    Ok(pos) => {
                        let in_frame = pos.x >= 0.0
                            && pos.y >= 0.0
                            && pos.x <= (cfg.width - 1) as f64
                            && pos.y <= (cfg.height - 1) as f64;
                        CornerTruth {
                            pos,
                            visible: facing && in_frame,
                        }
                    }
                    Err(_) => CornerTruth {
                        pos: Vec2::repeat(f64::NAN),
                        visible: false,
                    },
                }
            })
        })
        .collect();
    GroundTruth {
        marker: layout.id,
        pose: cfg.pose,
        corners,
    }
}

/// Separable Gaussian blur with clamped borders.
fn gaussian_blur(buf: &mut [f64], w: usize, h: usize, sigma: f64) {
    let rad = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-rad..=rad)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let sx = (x as isize + i as isize - rad).clamp(0, w as isize - 1) as usize;
                    k * buf[y * w + sx]
                })
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            buf[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let sy = (y as isize + i as isize - rad).clamp(0, h as isize - 1) as usize;
                    k * tmp[sy * w + x]
                })
                .sum();
        }
    }
}

/// Random pose ranges for scene sampling (angles in degrees).
#[derive(Debug, Clone, Copy)]
pub struct PoseSampler {
    /// Rotation about the cylinder axis.
    pub yaw: f64,
    /// Tilt of the axis towards or away from the camera.
    pub pitch: f64,
    /// In-image rotation.
    pub roll: f64,
    pub distance: (f64, f64),
}

impl Default for PoseSampler {
    fn default() -> Self {
        Self {
            yaw: 60.0,
            pitch: 45.0,
            roll: 180.0,
            distance: (300.0, 800.0),
        }
    }
}

/// Pose with the cylinder axis along the image's upward direction and the
/// pattern origin column facing the camera, before yaw/pitch/roll.
pub fn scene_pose(yaw: f64, pitch: f64, roll: f64, centre: Vec3, height: f64) -> RigidTransform {
    let r0 = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI);
    let r = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), roll.to_radians())
        * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), pitch.to_radians())
        * r0
        * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw.to_radians());
    let t = centre - r * Vec3::new(0.0, height / 2.0, 0.0);
    RigidTransform::new(r, t)
}

impl PoseSampler {
    /// Draws a pose whose marker stays inside the image.
    pub fn sample<R: Rng>(&self, rng: &mut R, layout: &MarkerLayout, cfg: &SceneConfig) -> RigidTransform {
        let sym = |rng: &mut R, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        let yaw = sym(rng, self.yaw);
        let pitch = sym(rng, self.pitch);
        let roll = sym(rng, self.roll);
        let z = rng.random_range(self.distance.0..=self.distance.1);
        let k = &cfg.intrinsics;
        let extent = (layout.height / 2.0 + layout.radius) * k.fx / z;
        let room_x = (cfg.width as f64 / 2.0 - extent - 10.0).max(0.0);
        let room_y = (cfg.height as f64 / 2.0 - extent - 10.0).max(0.0);
        let u = k.cx + sym(rng, room_x);
        let v = k.cy + sym(rng, room_y);
        let centre = Vec3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z);
        scene_pose(yaw, pitch, roll, centre, layout.height)
    }
}

fn clutter<R: Rng>(w: usize, h: usize, rng: &mut R) -> GrayImage {
    let mut img = GrayImage::new(w, h, rng.random_range(90..170));
    for _ in 0..40 {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let (rx, ry) = (
            rng.random_range(10.0..w as f64 / 6.0),
            rng.random_range(10.0..h as f64 / 6.0),
        );
        let v = rng.random_range(40..220);
        fill_ellipse(&mut img, cx, cy, rx, ry, rng.random_range(0.0..TAU), v);
    }
    img
}

fn fill_ellipse(img: &mut GrayImage, cx: f64, cy: f64, rx: f64, ry: f64, angle: f64, v: u8) {
    let (s, c) = angle.sin_cos();
    let r = rx.max(ry);
    let (w, h) = (img.width() as f64, img.height() as f64);
    let y0 = (cy - r).max(0.0) as usize;
    let y1 = (cy + r).min(h - 1.0).max(0.0) as usize;
    let x0 = (cx - r).max(0.0) as usize;
    let x1 = (cx + r).min(w - 1.0).max(0.0) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let (u, v2) = (c * dx + s * dy, -s * dx + c * dy);
            if (u / rx).powi(2) + (v2 / ry).powi(2) <= 1.0 {
                img.set(x, y, v);
            }
        }
    }
}

/// Kinds of marker-free images in the negative corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeKind {
    Blobs,
    Checkerboard,
    Stripes,
    Glyphs,
    Noise,
}

pub const NEGATIVE_KINDS: [NegativeKind; 5] = [
    NegativeKind::Blobs,
    NegativeKind::Checkerboard,
    NegativeKind::Stripes,
    NegativeKind::Glyphs,
    NegativeKind::Noise,
];

/// Procedural marker-free images, cycling through all kinds.
pub fn negative_corpus(count: usize, seed: u64, width: usize, height: usize) -> Vec<GrayImage> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
            negative_image(NEGATIVE_KINDS[i % NEGATIVE_KINDS.len()], width, height, &mut rng)
        })
        .collect()
}

pub fn negative_image<R: Rng>(kind: NegativeKind, w: usize, h: usize, rng: &mut R) -> GrayImage {
    let mut img = GrayImage::new(w, h, rng.random_range(150..240));
    match kind {
        NegativeKind::Blobs => {
            let n = rng.random_range(20..80);
            for _ in 0..n {
                let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
                let rx = rng.random_range(4.0..60.0);
                let ry = rng.random_range(4.0..60.0);
                let v = rng.random_range(0..120);
                fill_ellipse(&mut img, cx, cy, rx, ry, rng.random_range(0.0..TAU), v);
            }
        }
        NegativeKind::Checkerboard => {
            let cell = rng.random_range(8.0..60.0);
            let angle: f64 = rng.random_range(0.0..TAU);
            let (s, c) = angle.sin_cos();
            let (a, b) = (rng.random_range(0..80u8), rng.random_range(170..255u8));
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = (c * x as f64 + s * y as f64, -s * x as f64 + c * y as f64);
                    let odd = ((u / cell).floor() as i64 + (v / cell).floor() as i64).rem_euclid(2) == 1;
                    img.set(x, y, if odd { a } else { b });
                }
            }
        }
        NegativeKind::Stripes => {
            let period = rng.random_range(6.0..50.0);
            let duty = rng.random_range(0.2..0.8);
            let angle: f64 = rng.random_range(0.0..TAU);
            let (s, c) = angle.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let u = c * x as f64 + s * y as f64;
                    if (u / period).rem_euclid(1.0) < duty {
                        img.set(x, y, 30);
                    }
                }
            }
        }
        NegativeKind::Glyphs => {
            // rows of small bar-and-box glyphs, like printed text
            let size = rng.random_range(10usize..28);
            let stroke = (size / 5).max(2);
            let mut y = rng.random_range(5..20);
            while y + size < h {
                let mut x = rng.random_range(5..20);
                while x + size < w {
                    let gw = rng.random_range(size / 2..=size);
                    for _ in 0..rng.random_range(1..4) {
                        let vertical = rng.random_bool(0.5);
                        let (bw, bh) = if vertical { (stroke, size) } else { (gw, stroke) };
                        let ox = rng.random_range(0..=gw.saturating_sub(bw));
                        let oy = rng.random_range(0..=size - bh);
                        for yy in y + oy..y + oy + bh {
                            for xx in x + ox..(x + ox + bw).min(w) {
                                img.set(xx, yy, 20);
                            }
                        }
                    }
                    x += gw + rng.random_range(2..size / 2 + 3);
                }
                y += size + rng.random_range(4..size);
            }
        }
        NegativeKind::Noise => {
            // smoothed noise field
            let cell = rng.random_range(4usize..32);
            let (gw, gh) = (w / cell + 2, h / cell + 2);
            let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(0.0..255.0)).collect();
            for y in 0..h {
                for x in 0..w {
                    let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
                    let (ix, iy) = (fx as usize, fy as usize);
                    let (tx, ty) = (fx - ix as f64, fy - iy as f64);
                    let g = |a: usize, b: usize| grid[b * gw + a];
                    let v = g(ix, iy) * (1.0 - tx) * (1.0 - ty)
                        + g(ix + 1, iy) * tx * (1.0 - ty)
                        + g(ix, iy + 1) * (1.0 - tx) * ty
                        + g(ix + 1, iy + 1) * tx * ty;
                    img.set(x, y, v as u8);
                }
            }
        }
    }
    img
}

/// One point of the cross-ratio noise curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrNoiseSample {
    /// Midpoint of BC as a fraction of the line length.
    pub position: f64,
    pub std: f64,
}

/// Monte-Carlo spread of the cross-ratio of A, B, C, D on a line of length
/// `length` (A = 0, D = length) as the segment BC of width `bc` slides along
/// it. All four points get i.i.d. 2D Gaussian noise of std `sigma`.
pub fn cr_noise_simulation(
    length: f64,
    bc: f64,
    sigma: f64,
    trials: usize,
    positions: usize,
    seed: u64,
) -> Result<Vec<CrNoiseSample>, SynthError> {
    if !(bc > 0.0 && bc < length) || positions < 2 || trials < 2 {
        return Err(SynthError::InvalidConfig("BC must fit inside the line".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    // keep B and C at least 5% of the line away from A and D
    let lo = bc / 2.0 + 0.05 * length;
    let hi = length - bc / 2.0 - 0.05 * length;
    if hi <= lo {
        return Err(SynthError::InvalidConfig("BC too wide for the line".into()));
    }
    Ok((0..positions)
        .map(|i| {
            let m = lo + (hi - lo) * i as f64 / (positions - 1) as f64;
            let base = [0.0, m - bc / 2.0, m + bc / 2.0, length];
            let crs: Vec<f64> = (0..trials)
                .map(|_| {
                    let p: [Vec2; 4] = std::array::from_fn(|k| {
                        if sigma > 0.0 {
                            Vec2::new(base[k] + noise.sample(&mut rng), noise.sample(&mut rng))
                        } else {
                            Vec2::new(base[k], 0.0)
                        }
                    });
                    cross_ratio_euclidean(&p)
                })
                .collect();
            // shifted by the first draw so a constant series gives exactly 0
            let n = trials as f64;
            let d: Vec<f64> = crs.iter().map(|c| c - crs[0]).collect();
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
            CrNoiseSample {
                position: m / length,
                std: var.sqrt(),
            }
        })
        .collect())
}
