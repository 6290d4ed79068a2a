//! Symbol system of the marker: cross-ratio categories, the orientation bit,
//! line and feature codes, feature-field windows and the bidirectional
//! dictionary.
//!
//! A column ("feature subregion") carries two long edges. Each long edge is a
//! [`LineCode`] `(δ << 2) | category`, and the column code is the 6-bit
//! [`FeatureCode`] `(left << 3) | right`. Reading a marker from the other end
//! reverses the column order, swaps left and right and flips both `δ` bits;
//! [`reverse_code`] models that transformation.

use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Number of distinct feature codes.
pub const ALPHABET: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("orientation is degenerate: first and second quad edges have equal length")]
    DegenerateOrientation,
    #[error("invalid marker configuration {columns}c{field}f: need 1 <= f < n")]
    InvalidConfig { columns: usize, field: usize },
    #[error("marker {id} has {got} columns, expected {expected}")]
    WrongLength { id: u32, got: usize, expected: usize },
    #[error("duplicate marker id {0}")]
    DuplicateId(u32),
    #[error("window collision between marker {first} and marker {second}")]
    WindowCollision { first: u32, second: u32 },
    #[error("feature code {0} out of range")]
    CodeOutOfRange(u32),
    #[error("malformed dictionary file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Index into the cross-ratio category table (0..=3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CrCategory(u8);

impl CrCategory {
    pub fn new(index: u8) -> Option<Self> {
        (index < 4).then_some(Self(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = CrCategory> {
        (0..4).map(CrCategory)
    }
}

/// Nominal cross-ratio values and the accept band used to classify
/// measurements.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrCategories {
    pub nominals: [f64; 4],
    pub half_width: f64,
}

impl Default for CrCategories {
    fn default() -> Self {
        Self {
            nominals: [1.47, 1.54, 1.61, 1.68],
            half_width: 0.025,
        }
    }
}

impl CrCategories {
    pub fn nominal(&self, cat: CrCategory) -> f64 {
        self.nominals[cat.0 as usize]
    }

    /// Nearest category within the accept band, `None` otherwise.
    pub fn classify(&self, cr: f64) -> Option<CrCategory> {
        if !cr.is_finite() {
            return None;
        }
        let (idx, dist) = self
            .nominals
            .iter()
            .enumerate()
            .map(|(i, v)| (i, (cr - v).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))?;
        (dist <= self.half_width + 1e-12).then_some(CrCategory(idx as u8))
    }
}

/// Classifies against the default category table.
pub fn classify_cr(cr: f64) -> Option<CrCategory> {
    CrCategories::default().classify(cr)
}

/// Orientation bit of a long edge from its four corner positions in
/// geometric order: `δ = 0` when the first quad's edge is longer than the
/// second's, `1` otherwise.
pub fn orientation_indicator(c: [f64; 4]) -> Result<u8, CodecError> {
    let s1 = (c[1] - c[0]).abs();
    let s3 = (c[3] - c[2]).abs();
    if (s1 - s3).abs() < 0.02 * (s1 + s3) {
        return Err(CodecError::DegenerateOrientation);
    }
    Ok(if s1 > s3 { 0 } else { 1 })
}

/// 3-bit code of one long edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LineCode(u8);

impl LineCode {
    pub fn new(delta: u8, cat: CrCategory) -> Self {
        Self(((delta & 1) << 2) | cat.0)
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits < 8).then_some(Self(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn delta(self) -> u8 {
        self.0 >> 2
    }

    pub fn category(self) -> CrCategory {
        CrCategory(self.0 & 3)
    }

    /// Same edge read from the opposite end.
    pub fn flipped(self) -> Self {
        Self(self.0 ^ 4)
    }
}

/// 6-bit code of one column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureCode(u8);

impl FeatureCode {
    pub fn new(bits: u8) -> Option<Self> {
        ((bits as usize) < ALPHABET).then_some(Self(bits))
    }

    pub fn from_lines(left: LineCode, right: LineCode) -> Self {
        Self((left.0 << 3) | right.0)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn left(self) -> LineCode {
        LineCode(self.0 >> 3)
    }

    pub fn right(self) -> LineCode {
        LineCode(self.0 & 7)
    }

    pub fn reversed(self) -> Self {
        Self::from_lines(self.right().flipped(), self.left().flipped())
    }

    pub fn all() -> impl Iterator<Item = FeatureCode> {
        (0..ALPHABET as u8).map(FeatureCode)
    }
}

impl fmt::Display for FeatureCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn encode_line(delta: u8, cat: CrCategory) -> LineCode {
    LineCode::new(delta, cat)
}

pub fn encode_feature(left: LineCode, right: LineCode) -> FeatureCode {
    FeatureCode::from_lines(left, right)
}

pub fn reverse_code(c: FeatureCode) -> FeatureCode {
    c.reversed()
}

/// Column count and feature-field length, written `<n>c<f>f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MarkerConfig {
    pub columns: usize,
    pub field: usize,
}

impl MarkerConfig {
    pub fn new(columns: usize, field: usize) -> Result<Self, CodecError> {
        // keys are packed base-64 into a u64
        if field == 0 || field >= columns || field > 10 {
            return Err(CodecError::InvalidConfig { columns, field });
        }
        Ok(Self { columns, field })
    }
}

impl fmt::Display for MarkerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}c{}f", self.columns, self.field)
    }
}

impl FromStr for MarkerConfig {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CodecError::Malformed {
            line: 0,
            reason: format!("bad marker configuration '{s}'"),
        };
        let body = s.strip_suffix('f').ok_or_else(bad)?;
        let (n, f) = body.split_once('c').ok_or_else(bad)?;
        Self::new(n.parse().map_err(|_| bad())?, f.parse().map_err(|_| bad())?)
    }
}

/// Reading direction of a marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Reverse => "reverse",
        })
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forward" => Ok(Direction::Forward),
            "reverse" => Ok(Direction::Reverse),
            other => Err(format!("unknown direction '{other}'")),
        }
    }
}

/// One marker: a cyclic sequence of column codes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MarkerCode {
    pub id: u32,
    pub codes: Vec<FeatureCode>,
}

impl MarkerCode {
    pub fn new(id: u32, codes: Vec<FeatureCode>) -> Self {
        Self { id, codes }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Column sequence seen when reading in `dir`, starting at `offset`.
    pub fn read(&self, dir: Direction) -> Vec<FeatureCode> {
        let n = self.codes.len();
        match dir {
            Direction::Forward => self.codes.clone(),
            Direction::Reverse => (0..n).map(|j| self.codes[(n - j) % n].reversed()).collect(),
        }
    }
}

/// Packs a code sequence into a base-64 key.
pub fn window_key(codes: &[FeatureCode]) -> u64 {
    codes.iter().fold(0u64, |k, c| (k << 6) | c.0 as u64)
}

pub fn unpack_key(key: u64, f: usize) -> Vec<FeatureCode> {
    (0..f)
        .rev()
        .map(|i| FeatureCode(((key >> (6 * i)) & 63) as u8))
        .collect()
}

/// Key of the same window read from the other end.
pub fn reverse_key(key: u64, f: usize) -> u64 {
    let mut out = 0u64;
    for i in 0..f {
        let c = FeatureCode(((key >> (6 * i)) & 63) as u8);
        out = (out << 6) | c.reversed().0 as u64;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub key: u64,
    pub offset: usize,
    pub direction: Direction,
}

/// All `2n` cyclic windows of length `f`: `n` forward, `n` reverse-read.
pub fn windows(m: &MarkerCode, f: usize) -> Vec<Window> {
    let n = m.codes.len();
    let mut out = Vec::with_capacity(2 * n);
    for dir in [Direction::Forward, Direction::Reverse] {
        let seq = m.read(dir);
        for offset in 0..n {
            let w: Vec<FeatureCode> = (0..f).map(|i| seq[(offset + i) % n]).collect();
            out.push(Window {
                key: window_key(&w),
                offset,
                direction: dir,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowHit {
    pub id: u32,
    pub offset: usize,
    pub direction: Direction,
}

/// Result of a dictionary lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LookupMatch {
    pub id: u32,
    /// Position of the first observed symbol in the read sequence.
    pub offset: usize,
    pub direction: Direction,
    /// Fraction of observed symbols covered by agreeing windows.
    pub coverage: f64,
}

impl LookupMatch {
    /// Physical column index of observed symbol `i`.
    pub fn column_of(&self, i: usize, columns: usize) -> usize {
        let pos = (self.offset + i) % columns;
        match self.direction {
            Direction::Forward => pos,
            Direction::Reverse => (columns - pos) % columns,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LookupError {
    #[error("observed sequence of {got} symbols is shorter than the field length {field}")]
    TooShort { got: usize, field: usize },
    #[error("no dictionary window matches")]
    NotFound,
    #[error("several candidates share the maximal coverage")]
    Ambiguous,
}

pub const DICT_MAGIC: &str = "cylindertag-dict v1";

/// Marker dictionary with its window index.
#[derive(Debug, Clone)]
pub struct Dictionary {
    config: MarkerConfig,
    markers: Vec<MarkerCode>,
    index: HashMap<u64, WindowHit>,
}

impl Dictionary {
    /// Builds the window index; fails if any window key occurs twice.
    pub fn new(config: MarkerConfig, markers: Vec<MarkerCode>) -> Result<Self, CodecError> {
        let mut index = HashMap::with_capacity(markers.len() * config.columns * 2);
        let mut ids = HashSet::new();
        for m in &markers {
            if m.len() != config.columns {
                return Err(CodecError::WrongLength {
                    id: m.id,
                    got: m.len(),
                    expected: config.columns,
                });
            }
            if !ids.insert(m.id) {
                return Err(CodecError::DuplicateId(m.id));
            }
            for w in windows(m, config.field) {
                match index.entry(w.key) {
                    Entry::Occupied(e) => {
                        let hit: &WindowHit = e.get();
                        return Err(CodecError::WindowCollision {
                            first: hit.id,
                            second: m.id,
                        });
                    }
                    Entry::Vacant(e) => {
                        e.insert(WindowHit {
                            id: m.id,
                            offset: w.offset,
                            direction: w.direction,
                        });
                    }
                }
            }
        }
        Ok(Self { config, markers, index })
    }

    pub fn config(&self) -> MarkerConfig {
        self.config
    }

    pub fn markers(&self) -> &[MarkerCode] {
        &self.markers
    }

    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }

    pub fn marker(&self, id: u32) -> Option<&MarkerCode> {
        self.markers.iter().find(|m| m.id == id)
    }

    pub fn window(&self, key: u64) -> Option<&WindowHit> {
        self.index.get(&key)
    }

    /// Slides every length-`f` window of `observed` over the index and
    /// returns the candidate covering the most symbols.
    pub fn lookup(&self, observed: &[FeatureCode]) -> Result<LookupMatch, LookupError> {
        let f = self.config.field;
        let n = self.config.columns;
        if observed.len() < f {
            return Err(LookupError::TooShort {
                got: observed.len(),
                field: f,
            });
        }
        // candidate (id, direction, start offset) -> covered positions
        let mut votes: HashMap<(u32, Direction, usize), Vec<bool>> = HashMap::new();
        for i in 0..=observed.len() - f {
            let key = window_key(&observed[i..i + f]);
            if let Some(hit) = self.index.get(&key) {
                let start = (hit.offset + n - i % n) % n;
                let covered = votes
                    .entry((hit.id, hit.direction, start))
                    .or_insert_with(|| vec![false; observed.len()]);
                covered[i..i + f].iter_mut().for_each(|c| *c = true);
            }
        }
        let mut scored: Vec<((u32, Direction, usize), usize)> = votes
            .into_iter()
            .map(|(k, v)| (k, v.iter().filter(|c| **c).count()))
            .collect();
        scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        match scored.as_slice() {
            [] => Err(LookupError::NotFound),
            [a, b, ..] if a.1 == b.1 => Err(LookupError::Ambiguous),
            [((id, direction, offset), count), ..] => Ok(LookupMatch {
                id: *id,
                offset: *offset,
                direction: *direction,
                coverage: *count as f64 / observed.len() as f64,
            }),
        }
    }

    /// Text serialisation: header line then `id: c0 c1 ...` per marker.
    pub fn to_text(&self) -> String {
        let mut s = format!("{DICT_MAGIC} n={} f={}\n", self.config.columns, self.config.field);
        for m in &self.markers {
            s.push_str(&m.id.to_string());
            s.push(':');
            for c in &m.codes {
                s.push(' ');
                s.push_str(&c.0.to_string());
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CodecError> {
        let malformed = |line: usize, reason: &str| CodecError::Malformed {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| malformed(1, "empty file"))?;
        let rest = header
            .strip_prefix(DICT_MAGIC)
            .ok_or_else(|| malformed(1, "missing header"))?;
        let fields: Vec<&str> = rest.split_whitespace().collect();
        let (n, f) = match fields.as_slice() {
            [n, f] => (
                n.strip_prefix("n=")
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| malformed(1, "bad n="))?,
                f.strip_prefix("f=")
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| malformed(1, "bad f="))?,
            ),
            _ => return Err(malformed(1, "header needs n= and f=")),
        };
        let config = MarkerConfig::new(n, f)?;
        let mut markers = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let (id, codes) = line.split_once(':').ok_or_else(|| malformed(lineno, "missing ':'"))?;
            let id: u32 = id.trim().parse().map_err(|_| malformed(lineno, "bad marker id"))?;
            let codes = codes
                .split_whitespace()
                .map(|t| {
                    let v: u32 = t.parse().map_err(|_| malformed(lineno, "bad code"))?;
                    u8::try_from(v)
                        .ok()
                        .and_then(FeatureCode::new)
                        .ok_or(CodecError::CodeOutOfRange(v))
                })
                .collect::<Result<Vec<_>, _>>()?;
            markers.push(MarkerCode::new(id, codes));
        }
        Self::new(config, markers)
    }
}
