//! Heuristic-search dictionary generation.
//!
//! Markers are grown one column code at a time. At every step each legal
//! candidate is scored by how many codes would still be legal after it (a
//! one-step lookahead) and the best-scoring candidate is appended. The last
//! code must close the cycle without creating a conflicting window. Accepted
//! markers add all their windows, in both reading directions, to the
//! conflict library.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{
    reverse_key, window_key, windows, CodecError, Dictionary, FeatureCode, MarkerCode, MarkerConfig, ALPHABET,
};

/// Closure attempts for the final symbol before the marker is restarted.
const CLOSURE_ATTEMPTS: usize = 64;
/// Random draws for a seed window before falling back to a scan.
const SEED_DRAWS: usize = 256;

#[derive(Debug, Clone)]
enum KeySet {
    Dense(Vec<u64>),
    Sparse(HashSet<u64>),
}

/// Forbidden window keys. Closed under reverse-reading: inserting a key also
/// inserts its reverse.
#[derive(Debug, Clone)]
pub struct ConflictLibrary {
    field: usize,
    keys: KeySet,
    len: usize,
}

impl ConflictLibrary {
    pub fn empty(field: usize) -> Self {
        let keys = if field <= 4 {
            let bits = 1usize << (6 * field);
            KeySet::Dense(vec![0; bits.div_ceil(64)])
        } else {
            KeySet::Sparse(HashSet::new())
        };
        Self { field, keys, len: 0 }
    }

    /// Library pre-loaded with every window that equals its own reverse
    /// reading; such windows cannot tell the reading direction apart.
    pub fn seeded(field: usize) -> Self {
        let mut lib = Self::empty(field);
        for key in self_ambiguous_keys(field) {
            lib.insert(key);
        }
        lib
    }

    pub fn field(&self) -> usize {
        self.field
    }

    /// Number of stored keys.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, key: u64) -> bool {
        match &self.keys {
            KeySet::Dense(bits) => bits[(key >> 6) as usize] & (1 << (key & 63)) != 0,
            KeySet::Sparse(set) => set.contains(&key),
        }
    }

    fn insert_one(&mut self, key: u64) {
        let fresh = match &mut self.keys {
            KeySet::Dense(bits) => {
                let word = &mut bits[(key >> 6) as usize];
                let mask = 1 << (key & 63);
                let fresh = *word & mask == 0;
                *word |= mask;
                fresh
            }
            KeySet::Sparse(set) => set.insert(key),
        };
        if fresh {
            self.len += 1;
        }
    }

    pub fn insert(&mut self, key: u64) {
        self.insert_one(key);
        self.insert_one(reverse_key(key, self.field));
    }

    /// Adds every window of `marker`.
    pub fn insert_marker(&mut self, marker: &MarkerCode) {
        for w in windows(marker, self.field) {
            self.insert(w.key);
        }
    }
}

/// Windows `w` with `w == reverse(w)`: `w[i] = rev(w[f-1-i])`.
pub fn self_ambiguous_keys(field: usize) -> Vec<u64> {
    let half = field / 2;
    let mut out = Vec::new();
    let mids: Vec<Option<FeatureCode>> = if field % 2 == 1 {
        FeatureCode::all().filter(|c| c.reversed() == *c).map(Some).collect()
    } else {
        vec![None]
    };
    let total = ALPHABET.pow(half as u32);
    for prefix_idx in 0..total {
        let mut prefix = Vec::with_capacity(half);
        let mut v = prefix_idx;
        for _ in 0..half {
            prefix.push(FeatureCode::new((v % ALPHABET) as u8).unwrap());
            v /= ALPHABET;
        }
        for mid in &mids {
            let mut w = prefix.clone();
            if let Some(m) = mid {
                w.push(*m);
            }
            w.extend(prefix.iter().rev().map(|c| c.reversed()));
            out.push(window_key(&w));
        }
    }
    out
}

/// Generator inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub markers: usize,
    pub marker: MarkerConfig,
    pub seed: u64,
    /// Restricts the symbols markers may use; `None` means all 64 codes.
    pub alphabet: Option<Vec<FeatureCode>>,
    /// Consecutive failed marker attempts before giving up.
    pub max_failures: usize,
    /// Independent runs tried when the target size is not reached; the
    /// largest dictionary wins.
    pub restarts: usize,
}

impl GenConfig {
    pub fn new(markers: usize, columns: usize, field: usize, seed: u64) -> Result<Self, CodecError> {
        Ok(Self {
            markers,
            marker: MarkerConfig::new(columns, field)?,
            seed,
            alphabet: None,
            max_failures: 200,
            restarts: 8,
        })
    }
}

/// Generator output. `complete` is false when the target size was not
/// reached before the failure budget ran out.
#[derive(Debug, Clone)]
pub struct Generation {
    pub dictionary: Dictionary,
    pub complete: bool,
    pub attempts: usize,
}

/// Partial marker together with the keys it already uses (both readings).
struct Growth<'a> {
    field: usize,
    codes: Vec<FeatureCode>,
    used: Vec<u64>,
    conflicts: &'a ConflictLibrary,
}

impl<'a> Growth<'a> {
    fn new(field: usize, conflicts: &'a ConflictLibrary) -> Self {
        Self {
            field,
            codes: Vec::new(),
            used: Vec::new(),
            conflicts,
        }
    }

    fn from_partial(field: usize, partial: &[FeatureCode], conflicts: &'a ConflictLibrary) -> Self {
        let mut g = Self::new(field, conflicts);
        for c in partial {
            g.push(*c);
        }
        g
    }

    /// Key of the window that appending `code` would create.
    fn new_window(&self, code: FeatureCode) -> Option<u64> {
        let f = self.field;
        if self.codes.len() + 1 < f {
            return None;
        }
        let tail = &self.codes[self.codes.len() + 1 - f..];
        Some(tail.iter().fold(0u64, |k, c| (k << 6) | c.bits() as u64) << 6 | code.bits() as u64)
    }

    fn key_free(&self, key: u64) -> bool {
        let rev = reverse_key(key, self.field);
        rev != key && !self.conflicts.contains(key) && !self.used.contains(&key)
    }

    fn legal(&self, code: FeatureCode) -> bool {
        self.new_window(code).is_none_or(|k| self.key_free(k))
    }

    /// Like [`Self::legal`] with `extra` (a key and its reverse) treated as used.
    fn legal_with(&self, code: FeatureCode, prev: FeatureCode, extra: Option<u64>) -> bool {
        let f = self.field;
        let len = self.codes.len() + 1;
        if len + 1 < f {
            return true;
        }
        let mut key = 0u64;
        for i in (len + 1 - f)..len {
            let c = if i == len - 1 { prev } else { self.codes[i] };
            key = (key << 6) | c.bits() as u64;
        }
        key = (key << 6) | code.bits() as u64;
        if let Some(e) = extra {
            if key == e || key == reverse_key(e, f) {
                return false;
            }
        }
        self.key_free(key)
    }

    fn push(&mut self, code: FeatureCode) {
        if let Some(k) = self.new_window(code) {
            self.used.push(k);
            self.used.push(reverse_key(k, self.field));
        }
        self.codes.push(code);
    }

    fn potential(&self, candidate: FeatureCode, alphabet: &[FeatureCode]) -> usize {
        let extra = self.new_window(candidate);
        alphabet
            .iter()
            .filter(|x| self.legal_with(**x, candidate, extra))
            .count()
    }

    /// True when `code` closes the cycle with all windows distinct and free.
    fn closes(&self, code: FeatureCode) -> bool {
        let mut codes = self.codes.clone();
        codes.push(code);
        let m = MarkerCode::new(0, codes);
        let mut seen = HashSet::with_capacity(2 * m.len());
        windows(&m, self.field)
            .iter()
            .all(|w| w.key != reverse_key(w.key, self.field) && !self.conflicts.contains(w.key) && seen.insert(w.key))
    }
}

/// True iff appending `code` to `partial` creates no window that is already
/// forbidden or already used by `partial` in either reading direction.
pub fn legal(code: FeatureCode, partial: &[FeatureCode], conflicts: &ConflictLibrary) -> bool {
    Growth::from_partial(conflicts.field(), partial, conflicts).legal(code)
}

/// Number of codes that stay legal as the next symbol after appending
/// `candidate` to `partial`.
pub fn potential(
    partial: &[FeatureCode],
    candidate: FeatureCode,
    conflicts: &ConflictLibrary,
    alphabet: &[FeatureCode],
) -> usize {
    Growth::from_partial(conflicts.field(), partial, conflicts).potential(candidate, alphabet)
}

fn draw_seed(rng: &mut ChaCha8Rng, alphabet: &[FeatureCode], conflicts: &ConflictLibrary) -> Option<Vec<FeatureCode>> {
    let f = conflicts.field();
    let valid = |w: &[FeatureCode]| {
        let g = Growth::from_partial(f, &w[..f - 1], conflicts);
        g.legal(w[f - 1])
    };
    for _ in 0..SEED_DRAWS {
        let w: Vec<FeatureCode> = (0..f).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        if valid(&w) {
            return Some(w);
        }
    }
    // exhaustive fallback keeps tiny configurations exact
    let total = alphabet.len().checked_pow(f as u32)?;
    if total > 1 << 20 {
        return None;
    }
    let start = rng.random_range(0..total);
    (0..total).map(|i| (start + i) % total).find_map(|idx| {
        let mut v = idx;
        let w: Vec<FeatureCode> = (0..f)
            .map(|_| {
                let c = alphabet[v % alphabet.len()];
                v /= alphabet.len();
                c
            })
            .collect();
        valid(&w).then_some(w)
    })
}

fn grow_marker(
    rng: &mut ChaCha8Rng,
    length: usize,
    alphabet: &[FeatureCode],
    conflicts: &ConflictLibrary,
) -> Option<Vec<FeatureCode>> {
    let f = conflicts.field();
    let seed = draw_seed(rng, alphabet, conflicts)?;
    let mut g = Growth::from_partial(f, &seed, conflicts);
    let mut best = Vec::with_capacity(alphabet.len());
    while g.codes.len() < length - 1 {
        best.clear();
        let mut best_score = 0usize;
        for &c in alphabet {
            if !g.legal(c) {
                continue;
            }
            let score = g.potential(c, alphabet) + 1;
            if score > best_score {
                best_score = score;
                best.clear();
            }
            if score == best_score {
                best.push(c);
            }
        }
        if best.is_empty() {
            return None;
        }
        let pick = best[rng.random_range(0..best.len())];
        g.push(pick);
    }
    let mut order = alphabet.to_vec();
    order.shuffle(rng);
    let closing = order.into_iter().take(CLOSURE_ATTEMPTS).find(|c| g.closes(*c))?;
    g.codes.push(closing);
    Some(g.codes)
}

/// Runs the generator. Deterministic for a given configuration.
pub fn generate(cfg: &GenConfig) -> Result<Generation, CodecError> {
    let alphabet: Vec<FeatureCode> = match &cfg.alphabet {
        Some(a) if !a.is_empty() => a.clone(),
        _ => FeatureCode::all().collect(),
    };
    let mut best: Option<Vec<MarkerCode>> = None;
    let mut attempts = 0;
    for run in 0..cfg.restarts.max(1) as u64 {
        let seed = cfg.seed.wrapping_add(run.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (markers, tries) = run_once(cfg, &alphabet, seed);
        attempts += tries;
        if best.as_ref().is_none_or(|b| markers.len() > b.len()) {
            best = Some(markers);
        }
        if best.as_ref().is_some_and(|b| b.len() >= cfg.markers) {
            break;
        }
    }
    let markers = best.unwrap_or_default();
    let complete = markers.len() >= cfg.markers;
    Ok(Generation {
        dictionary: Dictionary::new(cfg.marker, markers)?,
        complete,
        attempts,
    })
}

fn run_once(cfg: &GenConfig, alphabet: &[FeatureCode], seed: u64) -> (Vec<MarkerCode>, usize) {
    let MarkerConfig { columns, field } = cfg.marker;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conflicts = ConflictLibrary::seeded(field);
    let mut markers: Vec<MarkerCode> = Vec::new();
    let mut failures = 0;
    let mut attempts = 0;
    while markers.len() < cfg.markers && failures < cfg.max_failures {
        attempts += 1;
        match grow_marker(&mut rng, columns, alphabet, &conflicts) {
            Some(codes) => {
                let marker = MarkerCode::new(markers.len() as u32, codes);
                conflicts.insert_marker(&marker);
                markers.push(marker);
                failures = 0;
            }
            None => failures += 1,
        }
    }
    (markers, attempts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fc(b: u8) -> FeatureCode {
        FeatureCode::new(b).unwrap()
    }

    #[test]
    fn empty_library_everything_legal() {
        let lib = ConflictLibrary::empty(2);
        assert!(FeatureCode::all().all(|c| legal(c, &[], &lib)));
    }

    #[test]
    fn accepted_window_is_illegal() {
        let mut lib = ConflictLibrary::seeded(2);
        let m = MarkerCode::new(0, (0..12).map(|i| fc(i * 5)).collect());
        lib.insert_marker(&m);
        // window (0, 5) belongs to the marker
        assert!(!legal(fc(5), &[fc(0)], &lib));
        assert!(legal(fc(7), &[fc(1)], &lib));
    }

    #[test]
    fn reverse_of_existing_window_is_illegal() {
        let lib = ConflictLibrary::seeded(2);
        // partial uses window (a,b) and its reverse (rev b, rev a)
        let (a, b, c) = (fc(9), fc(20), fc(33));
        let partial = [a, b, c, b.reversed()];
        assert!(legal(fc(40), &partial, &lib));
        // appending rev(a) after rev(b) recreates the reverse window
        assert!(!legal(a.reversed(), &partial, &lib));
    }

    #[test]
    fn self_ambiguous_seed() {
        for f in 1..=3 {
            let keys = self_ambiguous_keys(f);
            let brute: Vec<u64> = (0..64u64.pow(f as u32)).filter(|k| reverse_key(*k, f) == *k).collect();
            let mut sorted = keys.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, brute, "f={f}");
        }
    }

    #[test]
    fn first_symbol_potential_counts_self_conflicts() {
        let lib = ConflictLibrary::seeded(2);
        let alphabet: Vec<FeatureCode> = FeatureCode::all().collect();
        for c in FeatureCode::all() {
            let oracle = FeatureCode::all()
                .filter(|x| {
                    let k = window_key(&[c, *x]);
                    reverse_key(k, 2) != k
                })
                .count();
            assert_eq!(potential(&[], c, &lib, &alphabet), oracle);
            assert_eq!(oracle, 63);
        }
    }

    #[test]
    fn saturated_library_has_no_potential() {
        let mut lib = ConflictLibrary::empty(2);
        for k in 0..4096 {
            lib.insert(k);
        }
        let alphabet: Vec<FeatureCode> = FeatureCode::all().collect();
        for c in FeatureCode::all() {
            assert_eq!(potential(&[fc(3)], c, &lib, &alphabet), 0);
        }
    }

    #[test]
    fn potential_bounded_by_alphabet() {
        let lib = ConflictLibrary::seeded(3);
        let alphabet: Vec<FeatureCode> = FeatureCode::all().collect();
        let partial = [fc(1), fc(2), fc(3)];
        for c in FeatureCode::all() {
            assert!(potential(&partial, c, &lib, &alphabet) <= 64);
        }
    }

    #[test]
    fn library_is_closed_under_reversal() {
        let mut lib = ConflictLibrary::empty(3);
        let k = window_key(&[fc(1), fc(2), fc(3)]);
        lib.insert(k);
        assert!(lib.contains(k) && lib.contains(reverse_key(k, 3)));
        assert_eq!(lib.len(), 2);
    }
}
