//! Quadrilateral fitting on border chains and sub-pixel edge refinement.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{fit_line_tls, fit_line_weighted, intersect, Line2, Vec2};
use crate::imgproc::{upscale_coord, BorderChain, GrayImage, Region};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitThresholds {
    /// Straightness test for the start triplet.
    pub t_cost: f64,
    /// Maximum point-to-line distance of a segment (px).
    pub t_line: f64,
    /// Maximum regional area coverage mismatch.
    pub t_rac: f64,
    /// Shortest accepted segment (px).
    pub min_segment: usize,
}

impl Default for FitThresholds {
    fn default() -> Self {
        Self {
            t_cost: 1.05,
            t_line: 1.8,
            t_rac: 0.3,
            min_segment: 5,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("chain too short ({0} px)")]
    ChainTooShort(usize),
    #[error("no straight start triplet")]
    NoAnchor,
    #[error("border splits into {0} segments, not 4")]
    SegmentCount(usize),
    #[error("segment shorter than the minimum")]
    ShortSegment,
    #[error("three or more edges bow outward")]
    Rounded,
    #[error("corners do not form a convex quad")]
    NotConvex,
    #[error("zero-area quad")]
    ZeroArea,
}

/// Fitted quad. Corner `i` joins edges `i-1` and `i`; edge `i` runs from
/// corner `i` to corner `i+1`. The shoelace area of the corners is
/// positive.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadCandidate {
    pub corners: [Vec2; 4],
    pub lines: [Line2; 4],
    /// Label of the source region.
    pub region: usize,
    pub rac: f64,
}

pub fn signed_area(c: &[Vec2; 4]) -> f64 {
    (0..4)
        .map(|i| {
            let (a, b) = (c[i], c[(i + 1) % 4]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        / 2.0
}

pub fn is_convex(c: &[Vec2; 4]) -> bool {
    let turns: Vec<f64> = (0..4)
        .map(|i| {
            let (a, b, d) = (c[i], c[(i + 1) % 4], c[(i + 2) % 4]);
            let (u, v) = (b - a, d - b);
            u.x * v.y - u.y * v.x
        })
        .collect();
    turns.iter().all(|t| *t > 0.0) || turns.iter().all(|t| *t < 0.0)
}

impl QuadCandidate {
    pub fn area(&self) -> f64 {
        signed_area(&self.corners)
    }

    pub fn center(&self) -> Vec2 {
        self.corners.iter().sum::<Vec2>() / 4.0
    }

    pub fn edge_length(&self, i: usize) -> f64 {
        (self.corners[(i + 1) % 4] - self.corners[i]).norm()
    }

    /// Maps coordinates of a downsampled image back to full resolution.
    pub fn upscaled(&self, scale: usize) -> Self {
        if scale == 1 {
            return self.clone();
        }
        let up = |p: Vec2| Vec2::new(upscale_coord(p.x, scale), upscale_coord(p.y, scale));
        let corners = self.corners.map(up);
        let lines = std::array::from_fn(|i| Line2::through(corners[i], corners[(i + 1) % 4]));
        Self {
            corners,
            lines,
            region: self.region,
            rac: self.rac,
        }
    }
}

/// Regional area coverage `|S − count| / S`.
pub fn rac(q: &QuadCandidate, region: &Region) -> Result<f64, QuadError> {
    let s = q.area().abs();
    if s <= 0.0 {
        return Err(QuadError::ZeroArea);
    }
    Ok((s - region.area() as f64).abs() / s)
}

fn triplet_cost(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    let den = (a - c).norm();
    if den == 0.0 {
        f64::INFINITY
    } else {
        (a + c - 2.0 * b).norm() / den
    }
}

/// Largest chord deviation over `path[0..=end]`.
fn max_deviation(pts: &[Vec2], path: &[usize], end: usize) -> (f64, usize) {
    let (a, b) = (pts[path[0]], pts[path[end]]);
    let chord = b - a;
    let len = chord.norm();
    let mut best = (0.0, end);
    for (k, &i) in path.iter().enumerate().take(end).skip(1) {
        let d = if len > 0.0 {
            (chord.x * (pts[i].y - a.y) - chord.y * (pts[i].x - a.x)).abs() / len
        } else {
            (pts[i] - a).norm()
        };
        if d > best.0 {
            best = (d, k);
        }
    }
    best
}

struct Segment {
    /// Chain indices, in chain order.
    idx: Vec<usize>,
}

/// Turns the greedy pieces into a partition of the whole chain and
/// polishes it: every boundary moves to the split that best fits the two
/// neighbouring lines, and adjacent pieces that are jointly straight merge.
fn settle_segments(pts: &[Vec2], segments: Vec<Segment>, th: &FitThresholds) -> Vec<Segment> {
    let n = pts.len();
    let mut starts: Vec<usize> = segments.iter().map(|s| s.idx[0]).collect();
    let span = |starts: &[usize], k: usize| -> Vec<usize> {
        let (a, b) = (starts[k], starts[(k + 1) % starts.len()]);
        let len = (b + n - a) % n;
        let len = if len == 0 { n } else { len };
        (0..len).map(|i| (a + i) % n).collect()
    };
    let line_of = |idx: &[usize]| {
        let p: Vec<Vec2> = idx.iter().map(|&i| pts[i]).collect();
        fit_line_tls(&p).ok()
    };
    for _ in 0..4 {
        if starts.len() < 2 {
            break;
        }
        // boundary moves
        let k = starts.len();
        let lines: Vec<Option<Line2>> = (0..k).map(|i| line_of(&span(&starts, i))).collect();
        for j in 0..k {
            let prev = (j + k - 1) % k;
            let (Some(lp), Some(lj)) = (lines[prev], lines[j]) else {
                continue;
            };
            let a = starts[prev];
            let e = starts[(j + 1) % k];
            let len = (e + n - a) % n;
            let len = if len == 0 { n } else { len };
            let min = 2.min(len / 2);
            if len < 2 * min + 1 {
                continue;
            }
            let path: Vec<usize> = (0..len).map(|i| (a + i) % n).collect();
            // cost of splitting before position s: prefix on lp, suffix on lj
            let dp: Vec<f64> = path.iter().map(|&i| lp.distance(&pts[i]).powi(2)).collect();
            let dj: Vec<f64> = path.iter().map(|&i| lj.distance(&pts[i]).powi(2)).collect();
            let total_j: f64 = dj.iter().sum();
            let (mut left, mut right) = (0.0, total_j);
            let mut best = (f64::INFINITY, 0);
            for (s, (x, y)) in dp.iter().zip(&dj).enumerate() {
                if s >= min && s <= len - min {
                    let cost = left + right;
                    if cost < best.0 {
                        best = (cost, s);
                    }
                }
                left += x;
                right -= y;
            }
            if best.0.is_finite() {
                starts[j] = path[best.1];
            }
        }
        // merges
        let mut merged = false;
        while starts.len() > 4 {
            let k = starts.len();
            let best = (0..k)
                .filter_map(|i| {
                    let mut union = span(&starts, i);
                    union.extend(span(&starts, (i + 1) % k));
                    let l = line_of(&union)?;
                    let dev = union.iter().map(|&p| l.distance(&pts[p])).fold(0.0, f64::max);
                    Some((i, dev))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((i, dev)) if dev <= th.t_line => {
                    starts.remove((i + 1) % k);
                    merged = true;
                }
                _ => break,
            }
        }
        if !merged && starts.len() <= 4 {
            // one more boundary pass happens only after a merge
            break;
        }
    }
    (0..starts.len()).map(|k| Segment { idx: span(&starts, k) }).collect()
}

/// Splits the segment whose interior strays furthest from its end-to-end
/// chord at that point, if the deviation reaches `min_dev`.
fn split_bent_segment(pts: &[Vec2], segments: &[Segment], min_dev: f64) -> Option<Vec<Segment>> {
    let mut best: Option<(f64, usize, usize)> = None;
    for (k, seg) in segments.iter().enumerate() {
        if seg.idx.len() < 7 {
            continue;
        }
        let (dev, pos) = max_deviation(pts, &seg.idx, seg.idx.len() - 1);
        if pos >= 3 && pos + 3 < seg.idx.len() && best.is_none_or(|b| dev > b.0) {
            best = Some((dev, k, pos));
        }
    }
    let (dev, k, pos) = best?;
    if dev < min_dev {
        return None;
    }
    let mut out = Vec::with_capacity(segments.len() + 1);
    for (j, seg) in segments.iter().enumerate() {
        if j == k {
            out.push(Segment {
                idx: seg.idx[..pos].to_vec(),
            });
            out.push(Segment {
                idx: seg.idx[pos..].to_vec(),
            });
        } else {
            out.push(Segment { idx: seg.idx.clone() });
        }
    }
    Some(out)
}

/// Extended RDP decomposition of a closed border chain into four straight
/// segments, followed by line fits and corner intersection.
/// Sagitta of the parabola fitted to a segment's offsets from its chord,
/// positive when it bows away from `centroid`, and the rms residual of
/// that fit.
fn bow(pts: &[Vec2], idx: &[usize], centroid: Vec2) -> (f64, f64) {
    let (a, b) = (pts[idx[0]], pts[idx[idx.len() - 1]]);
    let len = (b - a).norm();
    if len < 1e-9 || idx.len() < 4 {
        return (0.0, 0.0);
    }
    let mut chord = Line2::through(a, b);
    if chord.signed_distance(&centroid) > 0.0 {
        chord = chord.flipped();
    }
    let dir = (b - a) / len;
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = nalgebra::Vector3::<f64>::zeros();
    let samples: Vec<(f64, f64)> = idx
        .iter()
        .map(|&i| ((pts[i] - a).dot(&dir) * 2.0 / len - 1.0, chord.signed_distance(&pts[i])))
        .collect();
    for &(u, d) in &samples {
        let row = nalgebra::Vector3::new(1.0, u, u * u);
        ata += row * row.transpose();
        atb += row * d;
    }
    let Some(c) = ata.try_inverse().map(|m| m * atb) else {
        return (0.0, 0.0);
    };
    let rss: f64 = samples
        .iter()
        .map(|&(u, d)| (d - c[0] - c[1] * u - c[2] * u * u).powi(2))
        .sum();
    (-c[2], (rss / (samples.len() as f64 - 3.0).max(1.0)).sqrt())
}

pub fn fit_quad(chain: &BorderChain, region: &Region, th: &FitThresholds) -> Result<QuadCandidate, QuadError> {
    let n = chain.len();
    if n < 16 {
        return Err(QuadError::ChainTooShort(n));
    }
    let pts: Vec<Vec2> = chain
        .points
        .iter()
        .map(|&(x, y)| Vec2::new(x as f64, y as f64))
        .collect();
    let centroid = Vec2::new(region.centroid.0, region.centroid.1);

    // straight anchor near the point closest to the centroid
    let nearest = (0..n)
        .min_by(|&a, &b| {
            (pts[a] - centroid)
                .norm_squared()
                .total_cmp(&(pts[b] - centroid).norm_squared())
        })
        .unwrap_or(0);
    let step = (n / 32).max(1);
    let anchor = (0..n)
        .map(|k| (nearest + k) % n)
        .find(|&s| triplet_cost(pts[s], pts[(s + step) % n], pts[(s + 2 * step) % n]) <= th.t_cost)
        .map(|s| (s + step) % n)
        .ok_or(QuadError::NoAnchor)?;

    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut segments: Vec<Segment> = Vec::new();
    let mut start = anchor;
    let mut first = true;
    let mut guard = 0;
    while owner.iter().any(|o| o.is_none()) && guard < 64 {
        guard += 1;
        // unclaimed run beginning at `start`
        let path: Vec<usize> = (0..n)
            .map(|k| (start + k) % n)
            .take_while(|&i| owner[i].is_none())
            .collect();
        if path.len() < 2 {
            if let Some(next) = (1..n).map(|k| (start + k) % n).find(|&i| owner[i].is_none()) {
                if path.len() == 1 {
                    owner[path[0]] = Some(usize::MAX);
                }
                start = next;
                continue;
            }
            break;
        }
        let mut end = if first { path.len() / 2 } else { path.len() - 1 };
        loop {
            let (dev, m) = max_deviation(&pts, &path, end);
            if dev <= th.t_line || m == end {
                break;
            }
            end = m;
        }
        // greedy expansion along the fitted line, forward and (for the
        // wrapping first segment) backward
        let mut lo = 0usize; // number of backward pixels
        let mut hi = end;
        for _ in 0..2 {
            let members: Vec<Vec2> = (0..lo)
                .map(|k| pts[path[path.len() - 1 - k]])
                .chain(path[..=hi].iter().map(|&i| pts[i]))
                .collect();
            let Ok(line) = fit_line_tls(&members) else { break };
            while hi + 1 < path.len() - lo && line.distance(&pts[path[hi + 1]]) <= th.t_line {
                hi += 1;
            }
            if first {
                while path.len() - 1 - lo > hi && line.distance(&pts[path[path.len() - 1 - lo]]) <= th.t_line {
                    lo += 1;
                }
            }
        }
        let mut idx: Vec<usize> = (0..lo).rev().map(|k| path[path.len() - 1 - k]).collect();
        idx.extend_from_slice(&path[..=hi]);
        let label = segments.len();
        for &i in &idx {
            owner[i] = Some(label);
        }
        start = path[hi];
        // short pieces stay provisional; settling may grow or merge them
        if idx.len() >= 3 {
            segments.push(Segment { idx });
        } else {
            // corner remnant
            for &i in &idx {
                owner[i] = Some(usize::MAX);
            }
        }
        first = false;
        if segments.len() > 12 {
            return Err(QuadError::SegmentCount(segments.len()));
        }
    }
    let mut segments = settle_segments(&pts, segments, th);
    if segments.len() == 3 {
        // a short edge meeting a long one at a shallow angle stays under
        // the line tolerance; split the most bent piece if it bends enough
        if let Some(split) = split_bent_segment(&pts, &segments, th.t_line) {
            segments = settle_segments(&pts, split, th);
        }
    }
    if segments.len() != 4 {
        return Err(QuadError::SegmentCount(segments.len()));
    }
    if segments.iter().any(|s| s.idx.len() < th.min_segment) {
        return Err(QuadError::ShortSegment);
    }
    // a round blob bows outward along at least three sides, well beyond
    // the pixel scatter; a quad has at most one such edge
    let bowed = segments
        .iter()
        .filter(|s| {
            let (sagitta, rms) = bow(&pts, &s.idx, centroid);
            sagitta > 1.0 && sagitta > 3.0 * rms.max(0.3)
        })
        .count();
    if bowed >= 3 {
        return Err(QuadError::Rounded);
    }

    // TLS refit, shifted outwards by the mean inset of border pixel centres
    let fit_edge = |members: &[Vec2]| -> Result<Line2, QuadError> {
        let mut l = fit_line_tls(members).map_err(|_| QuadError::ShortSegment)?;
        if l.signed_distance(&centroid) > 0.0 {
            l = l.flipped();
        }
        let inset = l.normal.x.abs().max(l.normal.y.abs()) / 2.0;
        Ok(l.shifted(inset))
    };
    let members: Vec<Vec<Vec2>> = segments
        .iter()
        .map(|s| s.idx.iter().map(|&i| pts[i]).collect())
        .collect();
    let mut lines = [Line2::new(Vec2::new(1.0, 0.0), 0.0); 4];
    for (m, line) in members.iter().zip(lines.iter_mut()) {
        let trim = (m.len() / 5).min(2);
        *line = fit_edge(&m[trim..m.len() - trim])?;
    }
    // where the border turns by only a few degrees the line intersection
    // is unstable; the junction of the two segments, put on the longer
    // line, is used there instead
    let junction = |i: usize| {
        let prev = &segments[(i + 3) % 4].idx;
        (pts[prev[prev.len() - 1]] + pts[segments[i].idx[0]]) / 2.0
    };
    let shallow: [bool; 4] = std::array::from_fn(|i| {
        let prev = &segments[(i + 3) % 4].idx;
        let next = &segments[i].idx;
        let j = junction(i);
        let (u, v) = (pts[prev[0]] - j, pts[next[next.len() - 1]] - j);
        u.dot(&v) < -(30f64.to_radians().cos()) * u.norm() * v.norm()
    });
    let corners_of = |lines: &[Line2; 4]| -> Result<[Vec2; 4], QuadError> {
        let mut c = [Vec2::zeros(); 4];
        for i in 0..4 {
            let (p, n) = ((i + 3) % 4, i);
            c[i] = if shallow[i] {
                let l = if segments[p].idx.len() >= segments[n].idx.len() {
                    &lines[p]
                } else {
                    &lines[n]
                };
                let j = junction(i);
                j - l.normal * l.signed_distance(&j)
            } else {
                intersect(&lines[p], &lines[n]).map_err(|_| QuadError::NotConvex)?
            };
        }
        Ok(c)
    };
    let mut corners = corners_of(&lines);
    // drop pixels that the neighbouring edge may have contaminated: within
    // t_line of this edge but close to a corner, measured along the edge
    for _ in 0..2 {
        let Ok(cs) = corners else { break };
        let mut next = lines;
        for e in 0..4 {
            let (a, b) = (cs[e], cs[(e + 1) % 4]);
            let len = (b - a).norm();
            if len <= 0.0 {
                return Err(QuadError::ShortSegment);
            }
            let dir = (b - a) / len;
            let margin = |other: &Line2| {
                let sin = (other.normal.x * lines[e].normal.y - other.normal.y * lines[e].normal.x).abs();
                1.0 + th.t_line / sin.max(0.2)
            };
            let (m0, m1) = (margin(&lines[(e + 3) % 4]), margin(&lines[(e + 1) % 4]));
            let kept: Vec<Vec2> = members[e]
                .iter()
                .copied()
                .filter(|p| {
                    let t = (p - a).dot(&dir);
                    t >= m0 && t <= len - m1
                })
                .collect();
            if kept.len() >= 3 {
                next[e] = fit_edge(&kept)?;
            }
        }
        lines = next;
        corners = corners_of(&lines);
    }
    // every corner must be convex and sit near the border it was cut from
    let reach = 8.0;
    let plausible = |c: &[Vec2; 4]| is_convex(c) && c.iter().all(|c| pts.iter().any(|p| (p - c).norm() <= reach));
    let mut corners = match corners {
        Ok(c) if plausible(&c) => c,
        _ => {
            // nearly collinear neighbours or a blunted tip: fall back to
            // the segment junctions and let refinement recover the corner
            let c: [Vec2; 4] = std::array::from_fn(|i| {
                let prev = &segments[(i + 3) % 4].idx;
                (pts[prev[prev.len() - 1]] + pts[segments[i].idx[0]]) / 2.0
            });
            if !is_convex(&c) {
                return Err(QuadError::NotConvex);
            }
            lines = std::array::from_fn(|i| {
                let l = Line2::through(c[i], c[(i + 1) % 4]);
                if l.signed_distance(&centroid) > 0.0 {
                    l.flipped()
                } else {
                    l
                }
            });
            c
        }
    };
    if signed_area(&corners) < 0.0 {
        // reverse orientation: corner i joins edges i-1 and i
        corners = [corners[0], corners[3], corners[2], corners[1]];
        lines = [lines[3], lines[2], lines[1], lines[0]];
    }
    let mut q = QuadCandidate {
        corners,
        lines,
        region: region.label,
        rac: 0.0,
    };
    q.rac = rac(&q, region)?;
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineParams {
    /// Search half-range along the edge normal (px).
    pub search: f64,
    /// Minimum accepted gradient peak (gray levels per px).
    pub min_gradient: f64,
    /// Distance weight scale as a fraction of the edge length.
    pub lambda_fraction: f64,
    /// Clearance kept from the neighbouring edges (px); samples closer to
    /// the adjacent edge than this, across the search window, are skipped.
    pub clearance: f64,
    /// Model each edge as a quadratic curve instead of a straight line.
    pub quadratic: bool,
    /// Largest accepted sagitta of a quadratic edge (px).
    pub max_bow: f64,
    /// Resampling passes; each starts from the previous corners.
    pub passes: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            search: 2.0,
            min_gradient: 8.0,
            lambda_fraction: 0.25,
            clearance: 0.5,
            quadratic: true,
            max_bow: 4.0,
            passes: 3,
        }
    }
}

struct EdgeSample {
    point: Vec2,
    gradient: f64,
}

/// Gradient peaks across one edge, outward normal `n`.
fn edge_samples(
    img: &GrayImage,
    (a, b): (Vec2, Vec2),
    (ang_a, ang_b): ((f64, f64), (f64, f64)),
    n: Vec2,
    p: &RefineParams,
) -> Vec<EdgeSample> {
    let len = (b - a).norm();
    // keep every probe position clear of the adjacent edges: a probe at
    // distance t from an acute corner and s across the edge lies
    // t·sin θ − |s|·cos θ away from the neighbouring edge; at an obtuse
    // corner the neighbour recedes and at least t remains
    let reach = p.search + 2.5;
    let margin = |(sin, cos): (f64, f64)| (p.clearance + 1.0 + reach * cos.max(0.0)) / sin.max(0.1);
    let (ma, mb) = (margin(ang_a), margin(ang_b));
    let usable = len - ma - mb;
    if usable <= 0.0 {
        return Vec::new();
    }
    let count = ((len / 2.0).floor() as usize).max(10);
    let dir = (b - a) / len;
    let step = 0.25;
    let k = (p.search / step).round() as i32;
    // the moment window reaches this far beyond the peak
    let tail = (2.0 / step) as i32;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let t = ma + usable * (i as f64 + 0.5) / count as f64;
        let base = a + dir * t;
        // intensity difference across the edge, dark inside and bright
        // outside giving a positive response
        let g: Vec<f64> = (-k - tail..=k + tail)
            .map(|j| {
                let q = base + n * (j as f64 * step);
                let (o, i) = (q + n * 0.5, q - n * 0.5);
                img.sample(o.x, o.y) - img.sample(i.x, i.y)
            })
            .collect();
        let (imax, &gmax) = g[tail as usize..g.len() - tail as usize]
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .map(|(j, v)| (j + tail as usize, v))
            .unwrap();
        if gmax < p.min_gradient {
            continue;
        }
        // sub-pixel location: first moment of the response around the
        // peak, which is exact for area-sampled step edges
        let (mut m0, mut m1) = (0.0, 0.0);
        for (j, v) in g
            .iter()
            .enumerate()
            .skip(imax - tail as usize)
            .take(2 * tail as usize + 1)
        {
            let w = v.max(0.0);
            m0 += w;
            m1 += w * j as f64;
        }
        let s = (m1 / m0 - (k + tail) as f64) * step;
        out.push(EdgeSample {
            point: base + n * s,
            gradient: gmax,
        });
    }
    out
}

/// Edge model in the frame of its initial chord: offset along `n` as a
/// polynomial in the normalized chord coordinate `s = 2t/len − 1`.
#[derive(Debug, Clone, Copy)]
struct EdgeCurve {
    a: Vec2,
    d: Vec2,
    n: Vec2,
    len: f64,
    coef: [f64; 3],
}

impl EdgeCurve {
    fn s(&self, t: f64) -> f64 {
        2.0 * t / self.len - 1.0
    }

    fn point(&self, t: f64) -> Vec2 {
        let s = self.s(t);
        let [c0, c1, c2] = self.coef;
        self.a + self.d * t + self.n * (c0 + c1 * s + c2 * s * s)
    }

    fn tangent(&self, t: f64) -> Vec2 {
        let s = self.s(t);
        let [_, c1, c2] = self.coef;
        self.d + self.n * ((c1 + 2.0 * c2 * s) * 2.0 / self.len)
    }
}

/// Weighted least-squares edge curve; quadratic when the samples span
/// enough of the edge to pin the bend, linear otherwise.
fn fit_curve(
    samples: &[EdgeSample],
    (a, b): (Vec2, Vec2),
    n: Vec2,
    weight: &dyn Fn(&Vec2) -> f64,
    p: &RefineParams,
) -> Option<EdgeCurve> {
    if samples.len() < 4 {
        return None;
    }
    let len = (b - a).norm();
    let d = (b - a) / len;
    let mut curve = EdgeCurve {
        a,
        d,
        n,
        len,
        coef: [0.0; 3],
    };
    let rows: Vec<(f64, f64, f64)> = samples
        .iter()
        .map(|e| {
            let r = e.point - a;
            (curve.s(r.dot(&d)), r.dot(&n), e.gradient * weight(&e.point))
        })
        .collect();
    let (lo, hi) = rows
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), r| (lo.min(r.0), hi.max(r.0)));
    let solve = |deg: usize| -> Option<[f64; 3]> {
        let m = deg + 1;
        let mut ata = nalgebra::DMatrix::<f64>::zeros(m, m);
        let mut atb = nalgebra::DVector::<f64>::zeros(m);
        for &(s, o, w) in &rows {
            let basis = [1.0, s, s * s];
            for i in 0..m {
                atb[i] += w * basis[i] * o;
                for j in 0..m {
                    ata[(i, j)] += w * basis[i] * basis[j];
                }
            }
        }
        let x = ata.cholesky()?.solve(&atb);
        let mut c = [0.0; 3];
        c[..m].copy_from_slice(x.as_slice());
        Some(c)
    };
    let quadratic = p.quadratic && samples.len() >= 8 && hi - lo >= 0.6;
    curve.coef = quadratic
        .then(|| solve(2))
        .flatten()
        .filter(|c| c[2].abs() <= p.max_bow)
        .or_else(|| solve(1))?;
    Some(curve)
}

/// Meeting point of the end of `e0` and the start of `e1` by Newton
/// iteration on both curve parameters.
fn meet(e0: &EdgeCurve, e1: &EdgeCurve) -> Option<Vec2> {
    let (mut t0, mut t1) = (e0.len, 0.0);
    for _ in 0..20 {
        let f = e0.point(t0) - e1.point(t1);
        let (j0, j1) = (e0.tangent(t0), -e1.tangent(t1));
        let det = j0.x * j1.y - j0.y * j1.x;
        if det.abs() < 1e-9 {
            return None;
        }
        let dt0 = (f.x * j1.y - f.y * j1.x) / det;
        let dt1 = (j0.x * f.y - j0.y * f.x) / det;
        t0 -= dt0;
        t1 -= dt1;
        if dt0.abs() + dt1.abs() < 1e-10 {
            break;
        }
    }
    let x = e0.point(t0);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Sub-pixel refinement on the full-resolution image.
///
/// Each edge is sampled along its length and the gradient peak across the
/// edge is located at every sample. For every corner, its two edges are
/// refitted with weights `g·exp(−d/λ)` (gradient magnitude times a decay
/// in the distance to that corner) and intersected. Edges are modelled as
/// quadratic curves so that the bend of a pattern edge wrapped on a
/// cylinder does not bias the corner; edges with fewer than four valid
/// samples keep their previous line.
pub fn refine_edges(q: &QuadCandidate, full: &GrayImage, p: &RefineParams) -> QuadCandidate {
    let mut cur = q.clone();
    for _ in 0..p.passes.max(1) {
        let next = refine_once(&cur, full, p);
        let moved = (0..4)
            .map(|i| (next.corners[i] - cur.corners[i]).norm())
            .fold(0.0, f64::max);
        cur = next;
        if moved < 0.01 {
            break;
        }
    }
    cur
}

fn refine_once(q: &QuadCandidate, full: &GrayImage, p: &RefineParams) -> QuadCandidate {
    let c = &q.corners;
    let center = q.center();
    let angle_at = |i: usize| {
        let u = (c[(i + 3) % 4] - c[i]).normalize();
        let v = (c[(i + 1) % 4] - c[i]).normalize();
        ((u.x * v.y - u.y * v.x).abs(), u.dot(&v))
    };
    let normals: [Vec2; 4] = std::array::from_fn(|i| {
        let (a, b) = (c[i], c[(i + 1) % 4]);
        let n = Vec2::new(-(b - a).y, (b - a).x).normalize();
        if n.dot(&(a - center)) < 0.0 {
            -n
        } else {
            n
        }
    });
    let samples: Vec<Vec<EdgeSample>> = (0..4)
        .map(|i| {
            let (a, b) = (c[i], c[(i + 1) % 4]);
            edge_samples(full, (a, b), (angle_at(i), angle_at((i + 1) % 4)), normals[i], p)
        })
        .collect();

    let curve = |edge: usize, weight: &dyn Fn(&Vec2) -> f64| {
        fit_curve(&samples[edge], (c[edge], c[(edge + 1) % 4]), normals[edge], weight, p)
    };
    let lambda = |edge: usize| (q.edge_length(edge) * p.lambda_fraction).max(1e-6);

    let mut corners = q.corners;
    for (i, corner) in corners.iter_mut().enumerate() {
        let (e0, e1) = ((i + 3) % 4, i);
        let k0 = curve(e0, &|x| (-(x - c[i]).norm() / lambda(e0)).exp());
        let k1 = curve(e1, &|x| (-(x - c[i]).norm() / lambda(e1)).exp());
        let x = match (k0, k1) {
            (Some(k0), Some(k1)) => meet(&k0, &k1),
            _ => {
                let line = |e: usize, k: Option<EdgeCurve>| {
                    k.map(|k| Line2::through(k.point(0.0), k.point(k.len)))
                        .unwrap_or(q.lines[e])
                };
                intersect(&line(e0, k0), &line(e1, k1)).ok()
            }
        };
        if let Some(x) = x {
            // a refinement that moves a corner further than the search
            // range allows (stretched along acute corners) indicates a
            // broken fit
            if (x - c[i]).norm() <= (2.0 * p.search + 1.0) / angle_at(i).0.max(0.1) {
                *corner = x;
            }
        }
    }
    let lines = std::array::from_fn(|i| {
        let pts: Vec<Vec2> = samples[i].iter().map(|e| e.point).collect();
        let w: Vec<f64> = samples[i].iter().map(|e| e.gradient).collect();
        if pts.len() < 4 {
            q.lines[i]
        } else {
            fit_line_weighted(&pts, &w).unwrap_or(q.lines[i])
        }
    });
    QuadCandidate {
        corners,
        lines,
        region: q.region,
        rac: q.rac,
    }
}
