//! From refined quads to decoded markers: pairing quads into feature
//! subregions, clustering subregions into markers, reading their codes and
//! decoding against a dictionary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    encode_feature, encode_line, orientation_indicator, CrCategories, Dictionary, Direction, FeatureCode, LookupError,
};
use crate::geometry::{cross_ratio_scalar, fit_line_tls, Vec2};
use crate::quadfit::QuadCandidate;

/// Thresholds for pairing two quads into one feature subregion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingCriteria {
    /// Angle tolerance in degrees.
    pub theta: f64,
    pub alpha_gap: f64,
    pub alpha_len: f64,
    pub alpha_s: f64,
    /// Gap band height as a fraction of the column height.
    pub gap_fraction: f64,
    /// Relative tolerance on the measured gap share.
    pub gap_tolerance: f64,
}

impl Default for PairingCriteria {
    fn default() -> Self {
        Self {
            theta: 5.0,
            alpha_gap: 0.067,
            alpha_len: 15.0,
            alpha_s: 0.33,
            gap_fraction: crate::layout::DEFAULT_GAP,
            gap_tolerance: 0.12,
        }
    }
}

/// Thresholds for grouping subregions into markers and splitting runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrganizeCriteria {
    /// Axis angle tolerance in degrees.
    pub theta: f64,
    /// Bound on `|l̂ · ĉ|` for axis and centre-connection unit vectors.
    pub t_ver: f64,
    /// Centre distance gate in units of the pair's mean subregion width.
    pub max_distance: f64,
    /// Column pitch over column width of the printed layout.
    pub pitch_ratio: f64,
    /// Spacing, relative to the pitch, beyond which a column is missing.
    pub gap_factor: f64,
}

impl Default for OrganizeCriteria {
    fn default() -> Self {
        Self {
            theta: 5.0,
            t_ver: 0.5,
            max_distance: 4.0,
            pitch_ratio: 4.0 / 3.0,
            gap_factor: 1.6,
        }
    }
}

/// Two quads forming one column of a marker.
///
/// Geometry is expressed in a frame where `axis` runs along the long edges
/// and "left" is the side of smaller `axis⊥ · p`, with `axis⊥ = (−axis.y,
/// axis.x)`. The axis sign is canonical: it points up in the image.
#[derive(Debug, Clone)]
pub struct FeatureSubregion {
    /// `[first, second]` along the axis.
    pub quads: [QuadCandidate; 2],
    /// Collinear corners of the left long edge, ascending along the axis.
    pub left: [Vec2; 4],
    pub right: [Vec2; 4],
    pub center: Vec2,
    pub axis: Vec2,
    /// Long-edge angles of both quads (degrees).
    pub theta_l: [f64; 2],
    /// Inner short-edge angles of both quads (degrees).
    pub theta_s: [f64; 2],
    pub long_len: [f64; 2],
    pub short_len: [f64; 2],
    /// Lateral misalignment of the two quads' long edges.
    pub gap: f64,
    pub sigma_l: f64,
    pub sigma_s: f64,
    /// Distance between the left and right long-edge lines.
    pub width: f64,
}

fn angle_deg(v: Vec2) -> f64 {
    v.y.atan2(v.x).to_degrees()
}

/// Difference of two undirected line angles, in `[0, 90]`.
fn line_angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

fn canonical(u: Vec2) -> Vec2 {
    if u.y < 0.0 || (u.y == 0.0 && u.x < 0.0) {
        u
    } else {
        -u
    }
}

fn perp(u: Vec2) -> Vec2 {
    Vec2::new(-u.y, u.x)
}

fn vertex_center(q: &QuadCandidate) -> Vec2 {
    q.corners.iter().sum::<Vec2>() / 4.0
}

struct QuadView {
    /// Long edges as corner index pairs.
    long: [(usize, usize); 2],
    short: [(usize, usize); 2],
    dir: Vec2,
}

/// Chooses the opposite-edge pair most parallel to `towards` as long edges.
fn view(q: &QuadCandidate, towards: Vec2) -> QuadView {
    let edge = |i: usize| (i, (i + 1) % 4);
    let unit = |(a, b): (usize, usize)| (q.corners[b] - q.corners[a]).normalize();
    let score = |e: (usize, usize)| unit(e).dot(&towards).abs();
    let (long, short) = if score(edge(0)) + score(edge(2)) >= score(edge(1)) + score(edge(3)) {
        ([edge(0), edge(2)], [edge(1), edge(3)])
    } else {
        ([edge(1), edge(3)], [edge(0), edge(2)])
    };
    // mean long direction with consistent sign
    let a = unit(long[0]);
    let mut b = unit(long[1]);
    if a.dot(&b) < 0.0 {
        b = -b;
    }
    let dir = (a + b).normalize();
    QuadView { long, short, dir }
}

/// Evaluates the pairing criteria for quads `a` and `b`.
pub fn try_pair(a: &QuadCandidate, b: &QuadCandidate, pc: &PairingCriteria) -> Option<FeatureSubregion> {
    let (ca, cb) = (vertex_center(a), vertex_center(b));
    let link = cb - ca;
    if link.norm() <= 0.0 {
        return None;
    }
    let c_hat = link.normalize();
    let (va, vb) = (view(a, c_hat), view(b, c_hat));
    let (tla, tlb, tc) = (angle_deg(va.dir), angle_deg(vb.dir), angle_deg(c_hat));
    if line_angle_diff(tla, tlb) > pc.theta
        || line_angle_diff(tla, tc) > pc.theta
        || line_angle_diff(tlb, tc) > pc.theta
    {
        return None;
    }
    let axis = canonical({
        let s = if va.dir.dot(&vb.dir) < 0.0 { -vb.dir } else { vb.dir };
        (va.dir + s).normalize()
    });
    let side = perp(axis);
    let (first, second, vf, vs) = if ca.dot(&axis) <= cb.dot(&axis) {
        (a, b, &va, &vb)
    } else {
        (b, a, &vb, &va)
    };
    let centre_of = |q: &QuadCandidate, (i, j): (usize, usize)| (q.corners[i] + q.corners[j]) / 2.0;

    // inner short edge: the one nearer the other quad
    let inner = |q: &QuadCandidate, v: &QuadView, other: Vec2| -> (usize, usize) {
        let d = |e| (centre_of(q, e) - other).norm();
        if d(v.short[0]) <= d(v.short[1]) {
            v.short[0]
        } else {
            v.short[1]
        }
    };
    let (cf, cs) = (vertex_center(first), vertex_center(second));
    let inner_f = inner(first, vf, cs);
    let inner_s = inner(second, vs, cf);
    let edge_vec = |q: &QuadCandidate, (i, j): (usize, usize)| q.corners[j] - q.corners[i];
    let theta_s = [
        angle_deg(edge_vec(first, inner_f)),
        angle_deg(edge_vec(second, inner_s)),
    ];
    if line_angle_diff(theta_s[0], theta_s[1]) > pc.theta {
        return None;
    }
    let short_len = [edge_vec(first, inner_f).norm(), edge_vec(second, inner_s).norm()];
    let mean_long =
        |q: &QuadCandidate, v: &QuadView| (edge_vec(q, v.long[0]).norm() + edge_vec(q, v.long[1]).norm()) / 2.0;
    let long_len = [mean_long(first, vf), mean_long(second, vs)];
    let sigma_l = long_len[0] + long_len[1];
    let sigma_s = short_len[0] + short_len[1];
    if sigma_l > pc.alpha_len * sigma_s {
        return None;
    }
    if (short_len[0] - short_len[1]).abs() > pc.alpha_s * short_len[0].min(short_len[1]) {
        return None;
    }

    // long edges of each quad, ordered left/right, endpoints ascending
    let sides = |q: &QuadCandidate, v: &QuadView| -> [[Vec2; 2]; 2] {
        let mut e = v.long.map(|(i, j)| {
            let (p, r) = (q.corners[i], q.corners[j]);
            if p.dot(&axis) <= r.dot(&axis) {
                [p, r]
            } else {
                [r, p]
            }
        });
        if (e[0][0] + e[0][1]).dot(&side) > (e[1][0] + e[1][1]).dot(&side) {
            e.swap(0, 1);
        }
        e
    };
    let (sf, ss) = (sides(first, vf), sides(second, vs));
    let left = [sf[0][0], sf[0][1], ss[0][0], ss[0][1]];
    let right = [sf[1][0], sf[1][1], ss[1][0], ss[1][1]];
    // misalignment: lateral offset of the second quad's edges from the first's
    let lateral = |e: &[Vec2; 4]| ((e[2] + e[3]) / 2.0 - (e[0] + e[1]) / 2.0).dot(&side).abs();
    let gap = lateral(&left).max(lateral(&right));
    if gap > pc.alpha_gap * sigma_l {
        return None;
    }
    // the gap band between the inner edges has a fixed share of the
    // column height
    let separation = (centre_of(second, inner_s) - centre_of(first, inner_f))
        .dot(&axis)
        .abs();
    let expected = pc.gap_fraction / (1.0 - pc.gap_fraction);
    if (separation / sigma_l - expected).abs() > pc.gap_tolerance * expected {
        return None;
    }
    let width = ((right.iter().sum::<Vec2>() - left.iter().sum::<Vec2>()) / 4.0).dot(&side);
    if width <= 0.0 {
        return None;
    }
    let theta_l = [angle_deg(vf.dir), angle_deg(vs.dir)];
    Some(FeatureSubregion {
        quads: [first.clone(), second.clone()],
        left,
        right,
        // outer corners sit at fixed heights whatever the code
        center: (left[0] + left[3] + right[0] + right[3]) / 4.0,
        axis,
        theta_l,
        theta_s,
        long_len,
        short_len,
        gap,
        sigma_l,
        sigma_s,
        width,
    })
}

/// Pairs quads into subregions; a quad that pairs with more than one
/// partner is discarded with all of its pairs.
pub fn pair_quads(quads: &[QuadCandidate], pc: &PairingCriteria) -> Vec<FeatureSubregion> {
    let n = quads.len();
    let centers: Vec<Vec2> = quads.iter().map(vertex_center).collect();
    let extent: Vec<f64> = quads
        .iter()
        .map(|q| (0..4).map(|i| q.edge_length(i)).fold(0.0, f64::max))
        .collect();
    let mut pairs = Vec::new();
    let mut count = vec![0usize; n];
    for i in 0..n {
        for j in i + 1..n {
            // centres of partner quads are at most about two long edges apart
            if (centers[i] - centers[j]).norm() > 2.0 * (extent[i] + extent[j]) {
                continue;
            }
            if let Some(s) = try_pair(&quads[i], &quads[j], pc) {
                count[i] += 1;
                count[j] += 1;
                pairs.push((i, j, s));
            }
        }
    }
    pairs
        .into_iter()
        .filter(|(i, j, _)| count[*i] == 1 && count[*j] == 1)
        .map(|(_, _, s)| s)
        .collect()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Whether two subregions belong to the same marker.
pub fn same_marker(a: &FeatureSubregion, b: &FeatureSubregion, oc: &OrganizeCriteria) -> bool {
    if line_angle_diff(angle_deg(a.axis), angle_deg(b.axis)) > oc.theta {
        return false;
    }
    let link = b.center - a.center;
    let dist = link.norm();
    if dist <= 0.0 || dist > oc.max_distance * (a.width + b.width) / 2.0 {
        return false;
    }
    let c = link / dist;
    a.axis.dot(&c).abs() <= oc.t_ver && b.axis.dot(&c).abs() <= oc.t_ver
}

/// Groups subregions into connected components; returns index lists.
pub fn organize_markers(subs: &[FeatureSubregion], oc: &OrganizeCriteria) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(subs.len());
    for i in 0..subs.len() {
        for j in i + 1..subs.len() {
            if same_marker(&subs[i], &subs[j], oc) {
                uf.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..subs.len() {
        groups.entry(uf.find(i)).or_default().push(i);
    }
    groups.into_values().collect()
}

/// One decoded column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnReading {
    pub code: FeatureCode,
    /// Corners in layout order (left edge 0, 1, 4, 5; right edge 3, 2, 7, 6)
    /// for a forward reading.
    pub corners: [Vec2; 8],
    pub center: Vec2,
    pub width: f64,
}

fn line_code(c: &[Vec2; 4], cats: &CrCategories) -> Option<crate::codec::LineCode> {
    let line = fit_line_tls(c).ok()?;
    let dir = line.direction();
    let t = c.map(|p| (p - c[0]).dot(&dir));
    let t = if t[3] < 0.0 { t.map(|v| -v) } else { t };
    if !(t[0] < t[1] && t[1] < t[2] && t[2] < t[3]) {
        return None;
    }
    let cr = cross_ratio_scalar(t[0], t[1], t[2], t[3]).ok()?;
    let cat = cats.classify(cr)?;
    let delta = orientation_indicator(t).ok()?;
    Some(encode_line(delta, cat))
}

/// Reads one subregion in the frame given by `axis` (which must be roughly
/// parallel to the subregion's own axis).
pub fn read_subregion(s: &FeatureSubregion, axis: Vec2, cats: &CrCategories) -> Option<ColumnReading> {
    let (left, right) = if s.axis.dot(&axis) >= 0.0 {
        (s.left, s.right)
    } else {
        // half-turn: sides swap and edges reverse
        let rev = |e: [Vec2; 4]| [e[3], e[2], e[1], e[0]];
        (rev(s.right), rev(s.left))
    };
    let code = encode_feature(line_code(&left, cats)?, line_code(&right, cats)?);
    let mut corners = [Vec2::zeros(); 8];
    for (k, idx) in [0, 1, 4, 5].into_iter().enumerate() {
        corners[idx] = left[k];
    }
    for (k, idx) in [3, 2, 7, 6].into_iter().enumerate() {
        corners[idx] = right[k];
    }
    Some(ColumnReading {
        code,
        corners,
        center: s.center,
        width: s.width,
    })
}

/// Reading frame of a cluster: canonical mean axis.
pub fn cluster_axis(subs: &[FeatureSubregion], cluster: &[usize]) -> Vec2 {
    let first = subs[cluster[0]].axis;
    let sum: Vec2 = cluster
        .iter()
        .map(|&i| {
            let a = subs[i].axis;
            if a.dot(&first) < 0.0 {
                -a
            } else {
                a
            }
        })
        .sum();
    canonical(sum.normalize())
}

/// Sorts a cluster across the axis and splits it into runs of adjacent,
/// readable columns.
pub fn extract_codes(
    subs: &[FeatureSubregion],
    cluster: &[usize],
    oc: &OrganizeCriteria,
    cats: &CrCategories,
) -> Vec<Vec<ColumnReading>> {
    if cluster.is_empty() {
        return Vec::new();
    }
    let axis = cluster_axis(subs, cluster);
    let side = perp(axis);
    let mut order: Vec<usize> = cluster.to_vec();
    order.sort_by(|&a, &b| subs[a].center.dot(&side).total_cmp(&subs[b].center.dot(&side)));
    let spacing: Vec<f64> = order
        .windows(2)
        .map(|w| {
            let (a, b) = (&subs[w[0]], &subs[w[1]]);
            (b.center - a.center).dot(&side) / ((a.width + b.width) / 2.0)
        })
        .collect();
    let mut runs: Vec<Vec<ColumnReading>> = Vec::new();
    let mut current: Vec<ColumnReading> = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        let adjacent = k > 0 && spacing[k - 1] <= oc.gap_factor * oc.pitch_ratio;
        if !adjacent && !current.is_empty() {
            runs.push(std::mem::take(&mut current));
        }
        match read_subregion(&subs[i], axis, cats) {
            Some(r) => current.push(r),
            None => {
                if !current.is_empty() {
                    runs.push(std::mem::take(&mut current));
                }
            }
        }
    }
    if !current.is_empty() {
        runs.push(current);
    }
    runs
}

/// A decoded marker.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerDetection {
    pub id: u32,
    pub direction: Direction,
    /// `(column index, corners in layout order)`, by ascending column.
    pub columns: Vec<(usize, [Vec2; 8])>,
    /// Observed codes in reading order.
    pub codes: Vec<FeatureCode>,
    pub coverage: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("no run reaches the field length")]
    TooShort,
    #[error("lookup failed: {0}")]
    Lookup(#[from] LookupError),
    #[error("a run matched only partially")]
    PartialMatch,
    #[error("runs disagree on identity or position")]
    Inconsistent,
}

/// Decodes the runs of one cluster.
///
/// A run is accepted when the best dictionary candidate explains all of
/// it, or at least `f + 1` of its columns; unexplained columns are left
/// out. Runs that fail to match are ignored, but accepted runs must agree.
pub fn decode(runs: &[Vec<ColumnReading>], dict: &Dictionary) -> Result<MarkerDetection, DecodeError> {
    let f = dict.config().field;
    let n = dict.config().columns;
    let long: Vec<&Vec<ColumnReading>> = runs.iter().filter(|r| r.len() >= f).collect();
    if long.is_empty() {
        return Err(DecodeError::TooShort);
    }
    let mut result: Option<(u32, Direction)> = None;
    let mut columns: BTreeMap<usize, [Vec2; 8]> = BTreeMap::new();
    let mut codes = Vec::new();
    let mut failure = DecodeError::PartialMatch;
    let (mut explained, mut total) = (0usize, 0usize);
    for run in &long {
        let observed: Vec<FeatureCode> = run.iter().map(|c| c.code).collect();
        total += observed.len();
        let m = match dict.lookup(&observed) {
            Ok(m) => m,
            Err(e) => {
                failure = e.into();
                continue;
            }
        };
        let seq = dict.marker(m.id).expect("indexed marker").read(m.direction);
        let hits: Vec<bool> = observed
            .iter()
            .enumerate()
            .map(|(i, c)| seq[(m.offset + i) % n] == *c)
            .collect();
        let count = hits.iter().filter(|h| **h).count();
        if count < observed.len() && count < f + 1 {
            continue;
        }
        match result {
            None => result = Some((m.id, m.direction)),
            Some(r) if r != (m.id, m.direction) => return Err(DecodeError::Inconsistent),
            _ => {}
        }
        for (i, c) in run.iter().enumerate().filter(|(i, _)| hits[*i]) {
            let col = m.column_of(i, n);
            let corners = match m.direction {
                Direction::Forward => c.corners,
                Direction::Reverse => half_turn(&c.corners),
            };
            if columns.insert(col, corners).is_some() {
                return Err(DecodeError::Inconsistent);
            }
            codes.push(c.code);
        }
        explained += count;
    }
    let (id, direction) = result.ok_or(failure)?;
    Ok(MarkerDetection {
        id,
        direction,
        columns: columns.into_iter().collect(),
        codes,
        coverage: explained as f64 / total as f64,
    })
}

/// Corner relabeling for a column read upside down: the physical left edge
/// is the observed right edge, traversed backwards.
fn half_turn(c: &[Vec2; 8]) -> [Vec2; 8] {
    // observed left c1..c4 = [0,1,4,5], right c1..c4 = [3,2,7,6]
    let left = [c[0], c[1], c[4], c[5]];
    let right = [c[3], c[2], c[7], c[6]];
    let mut out = [Vec2::zeros(); 8];
    for (k, idx) in [0, 1, 4, 5].into_iter().enumerate() {
        out[idx] = right[3 - k];
    }
    for (k, idx) in [3, 2, 7, 6].into_iter().enumerate() {
        out[idx] = left[3 - k];
    }
    out
}

/// Merges detections of the same marker found in separate clusters when
/// their columns do not overlap; conflicting duplicates are all dropped.
pub fn merge_detections(dets: Vec<MarkerDetection>) -> Vec<MarkerDetection> {
    let mut by_id: BTreeMap<u32, Vec<MarkerDetection>> = BTreeMap::new();
    for d in dets {
        by_id.entry(d.id).or_default().push(d);
    }
    let mut out = Vec::new();
    for (_, group) in by_id {
        let mut it = group.into_iter();
        let mut merged = it.next().expect("non-empty group");
        let mut ok = true;
        for d in it {
            let overlap = d
                .columns
                .iter()
                .any(|(c, _)| merged.columns.iter().any(|(m, _)| m == c));
            if overlap || d.direction != merged.direction {
                ok = false;
                break;
            }
            merged.columns.extend(d.columns);
            merged.codes.extend(d.codes);
        }
        if ok {
            merged.columns.sort_by_key(|(c, _)| *c);
            out.push(merged);
        }
    }
    out
}

impl MarkerDetection {
    /// Text block: `id direction coverage`, then `col corner u v` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {:.4}\n", self.id, self.direction, self.coverage);
        for (col, corners) in &self.columns {
            for (k, p) in corners.iter().enumerate() {
                let _ = writeln!(s, "{col} {k} {:.4} {:.4}", p.x, p.y);
            }
        }
        s
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("malformed detections at line {line}: {msg}")]
pub struct DetectionParseError {
    pub line: usize,
    pub msg: String,
}

/// Parses concatenated detection blocks; `#` lines are ignored.
pub fn parse_detections(text: &str) -> Result<Vec<MarkerDetection>, DetectionParseError> {
    let mut out: Vec<MarkerDetection> = Vec::new();
    let mut pending: BTreeMap<usize, [Option<Vec2>; 8]> = BTreeMap::new();
    let flush = |out: &mut Vec<MarkerDetection>, pending: &mut BTreeMap<usize, [Option<Vec2>; 8]>, line: usize| {
        if let Some(d) = out.last_mut() {
            for (col, cs) in std::mem::take(pending) {
                let mut c = [Vec2::zeros(); 8];
                for k in 0..8 {
                    c[k] = cs[k].ok_or_else(|| DetectionParseError {
                        line,
                        msg: format!("column {col} lacks corner {k}"),
                    })?;
                }
                d.columns.push((col, c));
            }
        }
        Ok(())
    };
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| DetectionParseError {
            line: ln + 1,
            msg: msg.to_string(),
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.len() {
            3 => {
                flush(&mut out, &mut pending, ln + 1)?;
                out.push(MarkerDetection {
                    id: tok[0].parse().map_err(|_| err("bad id"))?,
                    direction: tok[1].parse().map_err(|e: String| err(&e))?,
                    columns: Vec::new(),
                    codes: Vec::new(),
                    coverage: tok[2].parse().map_err(|_| err("bad coverage"))?,
                });
            }
            4 => {
                if out.is_empty() {
                    return Err(err("corner before detection header"));
                }
                let col: usize = tok[0].parse().map_err(|_| err("bad column"))?;
                let k: usize = tok[1].parse().map_err(|_| err("bad corner index"))?;
                if k >= 8 {
                    return Err(err("corner index out of range"));
                }
                let u: f64 = tok[2].parse().map_err(|_| err("bad u"))?;
                let v: f64 = tok[3].parse().map_err(|_| err("bad v"))?;
                pending.entry(col).or_insert([None; 8])[k] = Some(Vec2::new(u, v));
            }
            _ => return Err(err("expected 3 or 4 fields")),
        }
    }
    flush(&mut out, &mut pending, text.lines().count())?;
    Ok(out)
}
