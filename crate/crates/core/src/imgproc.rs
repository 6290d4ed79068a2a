//! Grayscale images, binarization, connected components and border chains.
//!
//! Pixel centres sit at integer coordinates: pixel `(x, y)` covers
//! `[x - 0.5, x + 0.5] × [y - 0.5, y + 0.5]`.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("buffer length {got} does not match {width}x{height}")]
    BufferSize { width: usize, height: usize, got: usize },
    #[error("image has zero size")]
    Empty,
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::BufferSize {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear interpolation with clamping at the image border.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let xm = (self.width - 1) as f64;
        let ym = (self.height - 1) as f64;
        let x = x.clamp(0.0, xm);
        let y = y.clamp(0.0, ym);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p = |x, y| self.get(x, y) as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Central-difference intensity gradient at a sub-pixel location.
    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (self.sample(x + 1.0, y) - self.sample(x - 1.0, y)) / 2.0,
            (self.sample(x, y + 1.0) - self.sample(x, y - 1.0)) / 2.0,
        )
    }

    pub fn read_pgm<R: Read>(mut reader: R) -> Result<Self, ImageError> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        parse_pgm(&bytes)
    }

    pub fn write_pgm<W: Write>(&self, mut writer: W) -> Result<(), ImageError> {
        write!(writer, "P5\n{} {}\n255\n", self.width, self.height)?;
        writer.write_all(&self.data)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        parse_pgm(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let mut out = Vec::with_capacity(self.data.len() + 32);
        self.write_pgm(&mut out)?;
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn parse_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let mut pos = 0;
    let mut token = || -> Result<String, ImageError> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(ImageError::Pgm("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(ImageError::Pgm("expected P5 magic".into()));
    }
    let mut num = |name: &str| -> Result<usize, ImageError> {
        token()?.parse().map_err(|_| ImageError::Pgm(format!("bad {name}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::Pgm(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let end = start + width * height;
    if bytes.len() < end {
        return Err(ImageError::Pgm("truncated raster".into()));
    }
    GrayImage::from_raw(width, height, bytes[start..end].to_vec())
}

/// Halves the resolution with a 2×2 box filter when the shorter side is at
/// least `min_side`. Returns the image and the scale factor (1 or 2).
pub fn downsample_with(img: &GrayImage, min_side: usize) -> (GrayImage, usize) {
    if img.width.min(img.height) < min_side {
        return (img.clone(), 1);
    }
    let (w, h) = (img.width / 2, img.height / 2);
    let mut out = GrayImage::new(w, h, 0);
    for y in 0..h {
        for x in 0..w {
            let s = img.get(2 * x, 2 * y) as u32
                + img.get(2 * x + 1, 2 * y) as u32
                + img.get(2 * x, 2 * y + 1) as u32
                + img.get(2 * x + 1, 2 * y + 1) as u32;
            out.set(x, y, ((s + 2) / 4) as u8);
        }
    }
    (out, 2)
}

pub fn downsample(img: &GrayImage) -> (GrayImage, usize) {
    downsample_with(img, 1200)
}

/// Maps a coordinate of the downsampled image back to full resolution.
pub fn upscale_coord(v: f64, scale: usize) -> f64 {
    if scale == 1 {
        v
    } else {
        scale as f64 * v + (scale as f64 - 1.0) / 2.0
    }
}

/// Binary image; `true` is black (foreground).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut b = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                b.data[y * width + x] = f(x, y);
            }
        }
        b
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_black(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, black: bool) {
        self.data[y * self.width + x] = black;
    }

    pub fn black_count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdParams {
    pub tile: usize,
    /// Minimum max−min contrast of a neighbourhood.
    pub min_contrast: u8,
    /// Flat tiles borrow the extrema of the nearest tile with contrast up to
    /// this many tiles away; farther ones (and all flat tiles when 0) are white.
    pub fill_radius: usize,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self {
            tile: 5,
            min_contrast: 10,
            fill_radius: 6,
        }
    }
}

pub fn adaptive_threshold(img: &GrayImage) -> BinaryImage {
    adaptive_threshold_with(img, &ThresholdParams::default())
}

/// Tile-based binarization: each pixel is compared with the mid-range of the
/// 3×3 tile neighbourhood around its tile.
pub fn adaptive_threshold_with(img: &GrayImage, p: &ThresholdParams) -> BinaryImage {
    let t = p.tile.max(1);
    let tw = img.width.div_ceil(t);
    let th = img.height.div_ceil(t);
    let mut tmin = vec![255u8; tw * th];
    let mut tmax = vec![0u8; tw * th];
    for y in 0..img.height {
        let row = &img.data[y * img.width..(y + 1) * img.width];
        let trow = (y / t) * tw;
        for (x, &v) in row.iter().enumerate() {
            let i = trow + x / t;
            tmin[i] = tmin[i].min(v);
            tmax[i] = tmax[i].max(v);
        }
    }
    let mut nmin = vec![255u8; tw * th];
    let mut nmax = vec![0u8; tw * th];
    for ty in 0..th {
        for tx in 0..tw {
            let (mut lo, mut hi) = (255u8, 0u8);
            for yy in ty.saturating_sub(1)..(ty + 2).min(th) {
                for xx in tx.saturating_sub(1)..(tx + 2).min(tw) {
                    lo = lo.min(tmin[yy * tw + xx]);
                    hi = hi.max(tmax[yy * tw + xx]);
                }
            }
            nmin[ty * tw + tx] = lo;
            nmax[ty * tw + tx] = hi;
        }
    }
    fill_flat_tiles(&mut nmin, &mut nmax, tw, th, p);
    let mut out = BinaryImage::new(img.width, img.height);
    for y in 0..img.height {
        let trow = (y / t) * tw;
        for x in 0..img.width {
            let i = trow + x / t;
            let (lo, hi) = (nmin[i], nmax[i]);
            if hi - lo < p.min_contrast {
                continue;
            }
            let v = img.data[y * img.width + x] as u16;
            out.data[y * img.width + x] = 2 * v < lo as u16 + hi as u16;
        }
    }
    out
}

/// Breadth-first spread of contrasted tile extrema into flat tiles, so the
/// uniform interior of a large dark shape keeps its dark label.
fn fill_flat_tiles(nmin: &mut [u8], nmax: &mut [u8], tw: usize, th: usize, p: &ThresholdParams) {
    if p.fill_radius == 0 {
        return;
    }
    let flat = |i: usize, lo: &[u8], hi: &[u8]| hi[i] - lo[i] < p.min_contrast;
    let mut dist = vec![usize::MAX; tw * th];
    let mut frontier: Vec<usize> = (0..tw * th).filter(|&i| !flat(i, nmin, nmax)).collect();
    for &i in &frontier {
        dist[i] = 0;
    }
    for d in 1..=p.fill_radius {
        let mut next = Vec::new();
        for &i in &frontier {
            let (tx, ty) = (i % tw, i / tw);
            let around = [
                (tx > 0).then(|| i - 1),
                (tx + 1 < tw).then(|| i + 1),
                (ty > 0).then(|| i - tw),
                (ty + 1 < th).then(|| i + tw),
            ];
            for j in around.into_iter().flatten() {
                if dist[j] == usize::MAX {
                    dist[j] = d;
                    nmin[j] = nmin[i];
                    nmax[j] = nmax[i];
                    next.push(j);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
}

/// Connected black region.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub label: usize,
    /// Inclusive bounding box `(min_x, min_y, max_x, max_y)`.
    pub bbox: (usize, usize, usize, usize),
    pub pixels: Vec<(usize, usize)>,
    pub centroid: (f64, f64),
}

impl Region {
    fn from_pixels(label: usize, pixels: Vec<(usize, usize)>) -> Self {
        let mut bbox = (usize::MAX, usize::MAX, 0, 0);
        let (mut sx, mut sy) = (0.0, 0.0);
        for &(x, y) in &pixels {
            bbox.0 = bbox.0.min(x);
            bbox.1 = bbox.1.min(y);
            bbox.2 = bbox.2.max(x);
            bbox.3 = bbox.3.max(y);
            sx += x as f64;
            sy += y as f64;
        }
        let n = pixels.len().max(1) as f64;
        Self {
            label,
            bbox,
            pixels,
            centroid: (sx / n, sy / n),
        }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AreaFilter {
    pub min_area: usize,
    /// Maximum region area as a fraction of the image area.
    pub max_fraction: f64,
}

impl Default for AreaFilter {
    fn default() -> Self {
        Self {
            min_area: 24,
            max_fraction: 0.05,
        }
    }
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let p = parent[parent[i as usize] as usize];
        parent[i as usize] = p;
        i = p;
    }
    i
}

fn union(parent: &mut [u32], a: u32, b: u32) -> u32 {
    let ra = find(parent, a);
    let rb = find(parent, b);
    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
    parent[hi as usize] = lo;
    lo
}

/// All 8-connected black regions, unfiltered, in raster order of their first
/// pixel. Two-pass labeling with union-find.
pub fn label_all(bin: &BinaryImage) -> Vec<Region> {
    let (w, h) = (bin.width, bin.height);
    let mut labels = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if !bin.data[y * w + x] {
                continue;
            }
            let mut l = 0u32;
            let mut neighbours = [0u32; 4];
            if x > 0 {
                neighbours[0] = labels[y * w + x - 1];
            }
            if y > 0 {
                let up = (y - 1) * w;
                if x > 0 {
                    neighbours[1] = labels[up + x - 1];
                }
                neighbours[2] = labels[up + x];
                if x + 1 < w {
                    neighbours[3] = labels[up + x + 1];
                }
            }
            for n in neighbours.into_iter().filter(|n| *n != 0) {
                l = if l == 0 { n } else { union(&mut parent, l, n) };
            }
            if l == 0 {
                l = parent.len() as u32;
                parent.push(l);
            }
            labels[y * w + x] = l;
        }
    }
    let mut compact = vec![usize::MAX; parent.len()];
    let mut pixels: Vec<Vec<(usize, usize)>> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l == 0 {
                continue;
            }
            let r = find(&mut parent, l) as usize;
            if compact[r] == usize::MAX {
                compact[r] = pixels.len();
                pixels.push(Vec::new());
            }
            pixels[compact[r]].push((x, y));
        }
    }
    pixels
        .into_iter()
        .enumerate()
        .map(|(i, p)| Region::from_pixels(i, p))
        .collect()
}

pub fn label_components(bin: &BinaryImage) -> Vec<Region> {
    label_components_with(bin, &AreaFilter::default())
}

pub fn label_components_with(bin: &BinaryImage, filter: &AreaFilter) -> Vec<Region> {
    let max = filter.max_fraction * (bin.width * bin.height) as f64;
    label_all(bin)
        .into_iter()
        .filter(|r| r.area() >= filter.min_area && r.area() as f64 <= max)
        .collect()
}

/// Region bitmap with a one-pixel empty frame.
struct Mask {
    x0: isize,
    y0: isize,
    w: usize,
    h: usize,
    bits: Vec<bool>,
}

impl Mask {
    fn of(region: &Region) -> Self {
        let (x0, y0, x1, y1) = region.bbox;
        let w = x1 - x0 + 3;
        let h = y1 - y0 + 3;
        let mut bits = vec![false; w * h];
        for &(x, y) in &region.pixels {
            bits[(y - y0 + 1) * w + (x - x0 + 1)] = true;
        }
        Self {
            x0: x0 as isize - 1,
            y0: y0 as isize - 1,
            w,
            h,
            bits,
        }
    }

    fn at(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.w
            && (y as usize) < self.h
            && self.bits[y as usize * self.w + x as usize]
    }
}

/// Morphological opening with a 2×2 structuring element, which removes
/// one-pixel-wide spurs and bridges. Returns the largest remaining
/// 8-connected piece, or `None` if nothing survives.
pub fn open_region(region: &Region) -> Option<Region> {
    let m = Mask::of(region);
    let (w, h) = (m.w as isize, m.h as isize);
    // erode: anchor at the top-left of the 2×2 block
    let mut eroded = vec![false; m.w * m.h];
    for y in 0..h {
        for x in 0..w {
            eroded[(y * w + x) as usize] = m.at(x, y) && m.at(x + 1, y) && m.at(x, y + 1) && m.at(x + 1, y + 1);
        }
    }
    let er = |x: isize, y: isize| x >= 0 && y >= 0 && x < w && y < h && eroded[(y * w + x) as usize];
    let opened = BinaryImage::from_fn(m.w, m.h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        er(x, y) || er(x - 1, y) || er(x, y - 1) || er(x - 1, y - 1)
    });
    let best = label_all(&opened).into_iter().max_by_key(|r| r.area())?;
    let pixels = best
        .pixels
        .iter()
        .map(|&(x, y)| ((x as isize + m.x0) as usize, (y as isize + m.y0) as usize))
        .collect();
    Some(Region::from_pixels(region.label, pixels))
}

/// Ordered outer border of a region.
#[derive(Debug, Clone, PartialEq)]
pub struct BorderChain {
    pub points: Vec<(usize, usize)>,
    pub closed: bool,
}

impl BorderChain {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BorderError {
    #[error("region has {0} pixels, need at least 24")]
    TooSmall(usize),
    #[error("border does not form a single closed chain")]
    NotSimple,
}

const N4: [(isize, isize); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
// clockwise in image coordinates (y down), starting east
const N8: [(isize, isize); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

fn adjacent8(a: (isize, isize), b: (isize, isize)) -> bool {
    let (dx, dy) = ((a.0 - b.0).abs(), (a.1 - b.1).abs());
    dx <= 1 && dy <= 1 && (dx, dy) != (0, 0)
}

/// Orders the outer border of a region into one closed 8-connected chain.
///
/// Border pixels are region pixels with a 4-neighbour in the background
/// connected to the outside, so holes are ignored. The walk follows the
/// outer side of the border set; pixels it cut off at diagonal corners are
/// spliced back in. Any pixel that cannot be placed,
/// or a chain whose ends do not meet, rejects the region.
pub fn trace_border(region: &Region) -> Result<BorderChain, BorderError> {
    if region.area() < 24 {
        return Err(BorderError::TooSmall(region.area()));
    }
    let m = Mask::of(region);
    let (w, h) = (m.w as isize, m.h as isize);
    let idx = |x: isize, y: isize| (y * w + x) as usize;
    // outer background, 4-connected flood fill from the frame
    let mut outside = vec![false; m.w * m.h];
    let mut queue = VecDeque::from([(0isize, 0isize)]);
    outside[0] = true;
    while let Some((x, y)) = queue.pop_front() {
        for (dx, dy) in N4 {
            let (nx, ny) = (x + dx, y + dy);
            if nx >= 0 && ny >= 0 && nx < w && ny < h && !outside[idx(nx, ny)] && !m.at(nx, ny) {
                outside[idx(nx, ny)] = true;
                queue.push_back((nx, ny));
            }
        }
    }
    let mut is_border = vec![false; m.w * m.h];
    let mut border = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if m.at(x, y) && N4.iter().any(|(dx, dy)| outside[idx(x + dx, y + dy)]) {
                is_border[idx(x, y)] = true;
                border.push((x, y));
            }
        }
    }
    let total = border.len();
    let bd = |x: isize, y: isize| x >= 0 && y >= 0 && x < w && y < h && is_border[idx(x, y)];

    // Moore-neighbour tracing over the border set, starting from the
    // raster-first pixel with its (empty) west neighbour as backtrack.
    let start = border[0];
    let mut visited = vec![false; m.w * m.h];
    let mut chain = vec![start];
    visited[idx(start.0, start.1)] = true;
    let mut cur = start;
    let mut back = 4usize;
    loop {
        let found = (1..=8)
            .map(|k| (back + k) % 8)
            .find(|&d| bd(cur.0 + N8[d].0, cur.1 + N8[d].1));
        let Some(d) = found else { break };
        let p = (cur.0 + N8[d].0, cur.1 + N8[d].1);
        if p == start {
            break;
        }
        if visited[idx(p.0, p.1)] {
            return Err(BorderError::NotSimple);
        }
        // the last position checked before `p` becomes its backtrack
        let prev = (d + 7) % 8;
        let q = (cur.0 + N8[prev].0 - p.0, cur.1 + N8[prev].1 - p.1);
        back = N8.iter().position(|n| *n == q).unwrap_or((d + 4) % 8);
        visited[idx(p.0, p.1)] = true;
        chain.push(p);
        cur = p;
    }
    // splice pixels skipped at diagonal steps back between their neighbours
    if chain.len() < total {
        let mut spliced = Vec::with_capacity(total);
        for i in 0..chain.len() {
            let a = chain[i];
            spliced.push(a);
            let b = chain[(i + 1) % chain.len()];
            if (a.0 - b.0).abs() == 1 && (a.1 - b.1).abs() == 1 {
                for c in [(a.0, b.1), (b.0, a.1)] {
                    if bd(c.0, c.1) && !visited[idx(c.0, c.1)] {
                        visited[idx(c.0, c.1)] = true;
                        spliced.push(c);
                        break;
                    }
                }
            }
        }
        chain = spliced;
    }
    if chain.len() != total || total < 3 || !adjacent8(chain[0], *chain.last().unwrap()) {
        return Err(BorderError::NotSimple);
    }
    if chain.windows(2).any(|p| !adjacent8(p[0], p[1])) {
        return Err(BorderError::NotSimple);
    }
    let points = chain
        .into_iter()
        .map(|(x, y)| ((x + m.x0) as usize, (y + m.y0) as usize))
        .collect();
    Ok(BorderChain { points, closed: true })
}
