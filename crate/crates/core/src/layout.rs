//! Printable marker geometry.
//!
//! The pattern is laid out flat: `x` runs around the circumference
//! (`0..2πr`), `y` along the cylinder axis (`0..h`). Each column holds two
//! quads stacked along `y`; its left and right long edges carry independent
//! layouts, so the short edges between them are sloped. Wrapping onto the
//! cylinder maps `(x, y)` to `(r·sin(x/r), y, r·cos(x/r))`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use thiserror::Error;

use crate::codec::{CrCategories, CrCategory, LineCode, MarkerCode};
use crate::geometry::{Vec2, Vec3};
use crate::imgproc::GrayImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("gap fraction {0} outside (0, 0.3]")]
    InvalidGap(f64),
    #[error("cross-ratio {cr} is not realizable with gap {gap}")]
    Infeasible { cr: f64, gap: f64 },
    #[error("edge layout has indistinguishable quad lengths")]
    Degenerate,
    #[error("marker code is empty")]
    Empty,
    #[error("resolution {0} dpi outside [72, 1200]")]
    InvalidDpi(f64),
    #[error("invalid dimensions: {0}")]
    InvalidDimension(String),
    #[error("malformed model file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Fractions of the column height taken by the first quad's edge (`s1`),
/// the gap (`s2`) and the second quad's edge (`s3`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeLayout {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

impl EdgeLayout {
    /// Normalized positions of the four corners along the edge.
    pub fn positions(&self) -> [f64; 4] {
        [0.0, self.s1, self.s1 + self.s2, 1.0]
    }
}

/// Solves `s² − (1−g)s + g(cr−1) = 0` for the quad edge fractions. The two
/// roots are `s1` and `s3`; `delta = 0` puts the larger one first.
pub fn solve_edge_layout_cr(cr: f64, delta: u8, gap: f64) -> Result<EdgeLayout, LayoutError> {
    if !(gap > 0.0 && gap <= 0.3) {
        return Err(LayoutError::InvalidGap(gap));
    }
    let b = 1.0 - gap;
    let disc = b * b - 4.0 * gap * (cr - 1.0);
    if disc <= 0.0 || cr <= 1.0 {
        return Err(LayoutError::Infeasible { cr, gap });
    }
    let hi = (b + disc.sqrt()) / 2.0;
    let lo = b - hi;
    if (hi - lo) < 0.02 * (hi + lo) {
        return Err(LayoutError::Degenerate);
    }
    let (s1, s3) = if delta == 0 { (hi, lo) } else { (lo, hi) };
    Ok(EdgeLayout { s1, s2: gap, s3 })
}

/// Edge layout for a category of the default table.
pub fn solve_edge_layout(cat: CrCategory, delta: u8, gap: f64) -> Result<EdgeLayout, LayoutError> {
    solve_edge_layout_cr(CrCategories::default().nominal(cat), delta, gap)
}

fn line_layout(code: LineCode, cats: &CrCategories, gap: f64) -> Result<EdgeLayout, LayoutError> {
    solve_edge_layout_cr(cats.nominal(code.category()), code.delta(), gap)
}

/// Physical parameters of a marker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutParams {
    /// Marker height along the axis (mm).
    pub height: f64,
    /// Cylinder radius (mm).
    pub radius: f64,
    pub gap: f64,
    /// White band between columns, as a fraction of the column pitch.
    pub separator: f64,
    pub categories: CrCategories,
}

/// Default gap band height, as a fraction of the column height.
pub const DEFAULT_GAP: f64 = 0.18;

impl Default for LayoutParams {
    fn default() -> Self {
        Self {
            height: 60.0,
            radius: 25.0,
            gap: DEFAULT_GAP,
            separator: 0.25,
            categories: CrCategories::default(),
        }
    }
}

impl LayoutParams {
    pub fn new(height: f64, radius: f64) -> Self {
        Self {
            height,
            radius,
            ..Self::default()
        }
    }
}

/// One column of the flat pattern. Corners 0–3 are the first quad
/// (left-bottom, left-top, right-top, right-bottom), 4–7 the second.
#[derive(Debug, Clone, PartialEq)]
pub struct SubregionLayout {
    pub left: EdgeLayout,
    pub right: EdgeLayout,
    /// Column pitch as a fraction of the circumference.
    pub width: f64,
    /// Flat corner coordinates (mm).
    pub corners: [Vec2; 8],
}

impl SubregionLayout {
    pub fn quads(&self) -> [[Vec2; 4]; 2] {
        let c = &self.corners;
        [[c[0], c[1], c[2], c[3]], [c[4], c[5], c[6], c[7]]]
    }

    /// Corners of the left (`false`) or right (`true`) long edge, bottom to
    /// top.
    pub fn edge(&self, right: bool) -> [Vec2; 4] {
        let c = &self.corners;
        if right {
            [c[3], c[2], c[7], c[6]]
        } else {
            [c[0], c[1], c[4], c[5]]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerLayout {
    pub id: u32,
    pub columns: Vec<SubregionLayout>,
    pub height: f64,
    pub radius: f64,
}

impl MarkerLayout {
    pub fn circumference(&self) -> f64 {
        2.0 * PI * self.radius
    }

    pub fn pitch(&self) -> f64 {
        self.circumference() / self.columns.len() as f64
    }
}

pub fn layout_marker(m: &MarkerCode, params: &LayoutParams) -> Result<MarkerLayout, LayoutError> {
    if m.is_empty() {
        return Err(LayoutError::Empty);
    }
    if !(params.height > 0.0 && params.radius > 0.0) {
        return Err(LayoutError::InvalidDimension(
            "height and radius must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&params.separator) {
        return Err(LayoutError::InvalidDimension("separator must be in [0, 1)".into()));
    }
    let n = m.len();
    let pitch = 2.0 * PI * params.radius / n as f64;
    let h = params.height;
    let columns = m
        .codes
        .iter()
        .enumerate()
        .map(|(j, code)| {
            let left = line_layout(code.left(), &params.categories, params.gap)?;
            let right = line_layout(code.right(), &params.categories, params.gap)?;
            let xl = (j as f64 + params.separator / 2.0) * pitch;
            let xr = (j as f64 + 1.0 - params.separator / 2.0) * pitch;
            let [l0, l1, l2, l3] = left.positions();
            let [r0, r1, r2, r3] = right.positions();
            let p = |x: f64, s: f64| Vec2::new(x, s * h);
            Ok(SubregionLayout {
                left,
                right,
                width: 1.0 / n as f64,
                corners: [
                    p(xl, l0),
                    p(xl, l1),
                    p(xr, r1),
                    p(xr, r0),
                    p(xl, l2),
                    p(xl, l3),
                    p(xr, r3),
                    p(xr, r2),
                ],
            })
        })
        .collect::<Result<Vec<_>, LayoutError>>()?;
    Ok(MarkerLayout {
        id: m.id,
        columns,
        height: h,
        radius: params.radius,
    })
}

fn inside_convex(q: &[Vec2; 4], p: Vec2) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let a = q[i];
        let b = q[(i + 1) % 4];
        let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

/// Rasterizes the unrolled pattern: black quads (0) on white (255). Row 0
/// is the top of the marker (`y = h`); each pixel takes the colour of its
/// centre.
pub fn render_pattern(layout: &MarkerLayout, dpi: f64) -> Result<GrayImage, LayoutError> {
    if !(72.0..=1200.0).contains(&dpi) {
        return Err(LayoutError::InvalidDpi(dpi));
    }
    if layout.columns.is_empty() {
        return Err(LayoutError::Empty);
    }
    let mm_per_px = 25.4 / dpi;
    let width = (layout.circumference() / mm_per_px).round() as usize;
    let height = (layout.height / mm_per_px).round() as usize;
    if width == 0 || height == 0 {
        return Err(LayoutError::Empty);
    }
    let sx = layout.circumference() / width as f64;
    let sy = layout.height / height as f64;
    let mut img = GrayImage::new(width, height, 255);
    for col in &layout.columns {
        for q in col.quads() {
            let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for c in &q {
                x0 = x0.min(c.x);
                x1 = x1.max(c.x);
                y0 = y0.min(c.y);
                y1 = y1.max(c.y);
            }
            let i0 = ((x0 / sx).floor().max(0.0)) as usize;
            let i1 = ((x1 / sx).ceil() as usize).min(width);
            let j0 = (((layout.height - y1) / sy).floor().max(0.0)) as usize;
            let j1 = (((layout.height - y0) / sy).ceil() as usize).min(height);
            for j in j0..j1 {
                let y = layout.height - (j as f64 + 0.5) * sy;
                for i in i0..i1 {
                    let x = (i as f64 + 0.5) * sx;
                    if inside_convex(&q, Vec2::new(x, y)) {
                        img.set(i, j, 0);
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Flat pattern point on the cylinder (axis = y).
pub fn wrap(radius: f64, p: Vec2) -> Vec3 {
    let a = p.x / radius;
    Vec3::new(radius * a.sin(), p.y, radius * a.cos())
}

pub const MODEL_MAGIC: &str = "cylindertag-model v1";

/// 3D corner positions of a marker; `corners[j][k]` is corner `k` of
/// column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerModel {
    pub marker: u32,
    pub radius: f64,
    pub height: f64,
    pub corners: Vec<[Vec3; 8]>,
}

impl CornerModel {
    pub fn columns(&self) -> usize {
        self.corners.len()
    }

    pub fn corner(&self, column: usize, corner: usize) -> Vec3 {
        self.corners[column][corner]
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MODEL_MAGIC} marker={} r={} h={}\n",
            self.marker, self.radius, self.height
        );
        for (j, col) in self.corners.iter().enumerate() {
            for (k, p) in col.iter().enumerate() {
                let _ = writeln!(s, "{j} {k} {:.6} {:.6} {:.6}", p.x, p.y, p.z);
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, LayoutError> {
        let bad = |line: usize, reason: &str| LayoutError::Malformed {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
        let rest = header
            .strip_prefix(MODEL_MAGIC)
            .ok_or_else(|| bad(1, "missing header"))?;
        let (mut marker, mut radius, mut height) = (None, None, None);
        for kv in rest.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(1, "bad header field"))?;
            match k {
                "marker" => marker = v.parse().ok(),
                "r" => radius = v.parse().ok(),
                "h" => height = v.parse().ok(),
                _ => {}
            }
        }
        let (Some(marker), Some(radius), Some(height)) = (marker, radius, height) else {
            return Err(bad(1, "header needs marker, r and h"));
        };
        let mut corners: Vec<[Option<Vec3>; 8]> = Vec::new();
        for (i, l) in lines {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad(i + 1, "expected `subregion corner x y z`"));
            }
            let j: usize = f[0].parse().map_err(|_| bad(i + 1, "bad subregion"))?;
            let k: usize = f[1].parse().map_err(|_| bad(i + 1, "bad corner"))?;
            if k >= 8 {
                return Err(bad(i + 1, "corner index must be < 8"));
            }
            let mut xyz = [0.0; 3];
            for (d, s) in xyz.iter_mut().zip(&f[2..]) {
                *d = s.parse().map_err(|_| bad(i + 1, "bad coordinate"))?;
            }
            if corners.len() <= j {
                corners.resize(j + 1, [None; 8]);
            }
            if corners[j][k].replace(Vec3::new(xyz[0], xyz[1], xyz[2])).is_some() {
                return Err(bad(i + 1, "duplicate corner"));
            }
        }
        let corners = corners
            .into_iter()
            .enumerate()
            .map(|(j, col)| {
                let mut out = [Vec3::zeros(); 8];
                for (k, p) in col.iter().enumerate() {
                    out[k] = p.ok_or_else(|| bad(0, &format!("subregion {j} misses corner {k}")))?;
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>, LayoutError>>()?;
        if corners.is_empty() {
            return Err(bad(0, "no corners"));
        }
        Ok(Self {
            marker,
            radius,
            height,
            corners,
        })
    }
}

pub fn ideal_cylinder_model(layout: &MarkerLayout) -> CornerModel {
    CornerModel {
        marker: layout.id,
        radius: layout.radius,
        height: layout.height,
        corners: layout
            .columns
            .iter()
            .map(|c| c.corners.map(|p| wrap(layout.radius, p)))
            .collect(),
    }
}
