//! Inducing schemes: a base set, a partition into cells with constant
//! return times, the induced map, and empirical checks of its Markov,
//! distortion and tail properties.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{image_pieces, preimages, DynamicalMap, Interval, Region, State};
use crate::parallel::map_tasks;
use crate::rng::{Domain, Stream};
use crate::stats::fit::{fit_line, fit_rate, FitWindow, RateFit};

/// Sorted, disjoint half-open ranges of cell symbols.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymbolSet(Vec<[u32; 2]>);

impl SymbolSet {
    pub fn all(n: usize) -> Self {
        if n == 0 {
            Self(Vec::new())
        } else {
            Self(vec![[0, n as u32]])
        }
    }

    pub fn from_ranges(mut ranges: Vec<[u32; 2]>) -> Self {
        ranges.retain(|r| r[1] > r[0]);
        ranges.sort_unstable();
        let mut out: Vec<[u32; 2]> = Vec::with_capacity(ranges.len());
        for r in ranges {
            match out.last_mut() {
                Some(last) if r[0] <= last[1] => last[1] = last[1].max(r[1]),
                _ => out.push(r),
            }
        }
        Self(out)
    }

    pub fn from_symbols(mut symbols: Vec<usize>) -> Self {
        symbols.sort_unstable();
        symbols.dedup();
        Self::from_ranges(symbols.into_iter().map(|s| [s as u32, s as u32 + 1]).collect())
    }

    pub fn contains(&self, s: usize) -> bool {
        let s = s as u32;
        let i = self.0.partition_point(|r| r[1] <= s);
        i < self.0.len() && self.0[i][0] <= s
    }

    pub fn contains_all(&self, symbols: &[usize]) -> bool {
        symbols.iter().all(|&s| self.contains(s))
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|r| (r[1] - r[0]) as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ranges(&self) -> &[[u32; 2]] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().flat_map(|r| (r[0] as usize)..(r[1] as usize))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellBounds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<[f64; 2]>,
    pub x: [f64; 2],
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub symbol: usize,
    pub bounds: CellBounds,
    pub return_time: u32,
    pub measure: f64,
    #[serde(rename = "image_symbols")]
    pub image: SymbolSet,
    pub image_measure: f64,
    #[serde(default = "yes")]
    pub aligned: bool,
    #[serde(default = "yes")]
    pub injective: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemeKind {
    /// Cells given explicitly; located by their bounds.
    Declared,
    /// First return to the base; located by iterating.
    FirstReturn,
    /// θ-strips times first return in the fiber.
    Strips { strips: usize, theta_factor: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub horizon: usize,
    pub discarded_mass: f64,
}

/// An image endpoint that misses every partition boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Offender {
    pub cell: usize,
    pub endpoint: f64,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeDocument {
    pub map_id: String,
    pub params: serde_json::Value,
    pub base: Region,
    pub scheme: SchemeKind,
    pub horizon: usize,
    pub discarded_mass: f64,
    pub piecewise_affine: bool,
    pub cells: Vec<Cell>,
    #[serde(default)]
    pub offenders: Vec<Offender>,
}

#[derive(Debug)]
pub struct InducingScheme {
    map: Arc<dyn DynamicalMap>,
    base: Region,
    kind: SchemeKind,
    cells: Vec<Cell>,
    truncation: Truncation,
    piecewise_affine: bool,
    offenders: Vec<Offender>,
    by_position: Vec<usize>,
    by_return: HashMap<u32, Vec<usize>>,
    strip_lookup: Vec<u32>,
    max_return: u32,
}

const ALIGN_TOL: f64 = 1e-9;

struct RawCell {
    lo: f64,
    hi: f64,
    r: u32,
}

impl InducingScheme {
    /// A scheme whose one-dimensional cells are given explicitly.
    pub fn declared(
        map: Arc<dyn DynamicalMap>,
        base: Interval,
        cells: &[(Interval, u32)],
        piecewise_affine: bool,
    ) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::InvalidParameter("a scheme needs at least one cell".into()));
        }
        let mut raw: Vec<RawCell> = cells.iter().map(|(i, r)| RawCell { lo: i.lo, hi: i.hi, r: *r }).collect();
        raw.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        let tol = 1e-12 * base.len().max(1.0);
        for w in raw.windows(2) {
            if w[1].lo < w[0].hi - tol {
                return Err(Error::InvalidParameter("declared cells overlap".into()));
            }
        }
        if raw.iter().any(|c| c.r == 0 || !(c.hi > c.lo)) {
            return Err(Error::InvalidParameter("cells need positive length and return time".into()));
        }
        let covered: f64 = raw.iter().map(|c| c.hi - c.lo).sum();
        if (covered - base.len()).abs() > tol {
            return Err(Error::InvalidParameter(format!(
                "declared cells cover {covered}, base has measure {}",
                base.len()
            )));
        }
        // keep the caller's symbol order
        let raw: Vec<RawCell> = cells.iter().map(|(i, r)| RawCell { lo: i.lo, hi: i.hi, r: *r }).collect();
        let horizon = raw.iter().map(|c| c.r).max().unwrap_or(0) as usize;
        Self::assemble_1d(
            map,
            base,
            SchemeKind::Declared,
            raw,
            Truncation { horizon, discarded_mass: 0.0 },
            piecewise_affine,
            false,
        )
    }

    fn assemble_1d(
        map: Arc<dyn DynamicalMap>,
        base: Interval,
        kind: SchemeKind,
        raw: Vec<RawCell>,
        truncation: Truncation,
        piecewise_affine: bool,
        strict: bool,
    ) -> Result<Self> {
        let branches = map.branches();
        if branches.is_empty() {
            return Err(Error::Unsupported(format!("map '{}' exposes no monotone branches", map.id())));
        }
        let n = raw.len();
        let mut by_position: Vec<usize> = (0..n).collect();
        by_position.sort_by(|&a, &b| raw[a].lo.total_cmp(&raw[b].lo));
        let pos_lo: Vec<f64> = by_position.iter().map(|&i| raw[i].lo).collect();
        let pos_hi: Vec<f64> = by_position.iter().map(|&i| raw[i].hi).collect();
        let mut boundaries: Vec<f64> = raw.iter().flat_map(|c| [c.lo, c.hi]).chain([base.lo, base.hi]).collect();
        boundaries.sort_by(f64::total_cmp);
        boundaries.dedup();

        let nearest = |y: f64| -> f64 {
            let i = boundaries.partition_point(|&b| b < y);
            let mut d = f64::INFINITY;
            if i < boundaries.len() {
                d = d.min((boundaries[i] - y).abs());
            }
            if i > 0 {
                d = d.min((y - boundaries[i - 1]).abs());
            }
            d
        };

        type Computed = (SymbolSet, f64, Vec<Offender>, bool);
        let computed: Vec<Computed> = raw
            .par_iter()
            .enumerate()
            .map(|(sym, c)| {
                let pieces = image_pieces(map.as_ref(), &branches, c.lo, c.hi, c.r);
                let mut offenders = Vec::new();
                let mut spans: Vec<[f64; 2]> = Vec::with_capacity(pieces.len());
                let mut tol_max = ALIGN_TOL;
                for p in &pieces {
                    let src = p.source[1] - p.source[0];
                    let img = p.image[1] - p.image[0];
                    let slope = if src > 0.0 { img / src } else { 1.0 };
                    let scale = c.lo.abs().max(c.hi.abs()).max(1.0);
                    let tol = ALIGN_TOL.max(16.0 * f64::EPSILON * scale * slope);
                    tol_max = tol_max.max(tol);
                    for e in p.image {
                        let d = nearest(e);
                        if d > tol {
                            offenders.push(Offender { cell: sym, endpoint: e, offset: d });
                        }
                    }
                    spans.push(p.image);
                }
                spans.sort_by(|a, b| a[0].total_cmp(&b[0]));
                let piece_total: f64 = spans.iter().map(|s| s[1] - s[0]).sum();
                let mut merged: Vec<[f64; 2]> = Vec::new();
                for s in spans {
                    match merged.last_mut() {
                        Some(m) if s[0] <= m[1] + tol_max => m[1] = m[1].max(s[1]),
                        _ => merged.push(s),
                    }
                }
                let union: f64 = merged.iter().map(|m| m[1] - m[0]).sum();
                let injective = union >= piece_total - 2.0 * tol_max * pieces.len() as f64;
                let image_measure: f64 =
                    merged.iter().map(|m| (m[1].min(base.hi) - m[0].max(base.lo)).max(0.0)).sum();
                let mut ranges: Vec<[u32; 2]> = Vec::new();
                // a cell belongs to the image when at least half of it is covered
                let covers = |k: usize, m: &[f64; 2]| {
                    let w = pos_hi[k] - pos_lo[k];
                    pos_hi[k].min(m[1]) - pos_lo[k].max(m[0]) >= 0.5 * w
                };
                for m in &merged {
                    let mut first = pos_hi.partition_point(|&h| h <= m[0]);
                    let mut last = pos_lo.partition_point(|&l| l < m[1]);
                    if first < last && !covers(first, m) {
                        first += 1;
                    }
                    if first < last && !covers(last - 1, m) {
                        last -= 1;
                    }
                    if first >= last {
                        continue;
                    }
                    if first == 0 && last == n {
                        ranges = vec![[0, n as u32]];
                        break;
                    }
                    for &i in &by_position[first..last] {
                        ranges.push([i as u32, i as u32 + 1]);
                    }
                }
                (SymbolSet::from_ranges(ranges), image_measure, offenders, injective)
            })
            .collect();

        let mut offenders = Vec::new();
        let mut cells = Vec::with_capacity(n);
        for (sym, (c, (image, image_measure, off, injective))) in raw.iter().zip(computed).enumerate() {
            let aligned = off.is_empty();
            offenders.extend(off);
            cells.push(Cell {
                symbol: sym,
                bounds: CellBounds { theta: None, x: [c.lo, c.hi] },
                return_time: c.r,
                measure: c.hi - c.lo,
                image,
                image_measure,
                aligned,
                injective,
            });
        }
        if strict {
            if let Some(o) = offenders.first() {
                return Err(Error::NonMarkovPartition { cell: o.cell, endpoint: o.endpoint, offset: o.offset });
            }
        }
        let mut s = Self {
            map,
            base: Region::interval(base),
            kind,
            cells,
            truncation,
            piecewise_affine,
            offenders,
            by_position,
            by_return: HashMap::new(),
            strip_lookup: Vec::new(),
            max_return: 0,
        };
        s.index();
        Ok(s)
    }

    fn index(&mut self) {
        self.max_return = self.cells.iter().map(|c| c.return_time).max().unwrap_or(0);
        self.by_return.clear();
        for (i, c) in self.cells.iter().enumerate() {
            self.by_return.entry(c.return_time).or_default().push(i);
        }
        if self.base.theta.is_none() {
            let mut pos: Vec<usize> = (0..self.cells.len()).collect();
            pos.sort_by(|&a, &b| self.cells[a].bounds.x[0].total_cmp(&self.cells[b].bounds.x[0]));
            self.by_position = pos;
        }
        if let SchemeKind::Strips { strips, .. } = self.kind {
            let h = self.truncation.horizon;
            let mut lookup = vec![u32::MAX; strips * h];
            for (i, c) in self.cells.iter().enumerate() {
                let th = c.bounds.theta.unwrap_or([0.0, 1.0]);
                let j = ((th[0] * strips as f64).round() as usize).min(strips - 1);
                lookup[j * h + c.return_time as usize - 1] = i as u32;
            }
            self.strip_lookup = lookup;
        }
    }

    pub fn map(&self) -> &Arc<dyn DynamicalMap> {
        &self.map
    }

    pub fn base(&self) -> Region {
        self.base
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, i: usize) -> &Cell {
        &self.cells[i]
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn truncation(&self) -> Truncation {
        self.truncation
    }

    pub fn is_truncated(&self) -> bool {
        self.truncation.discarded_mass > 0.0
    }

    pub fn piecewise_affine(&self) -> bool {
        self.piecewise_affine
    }

    pub fn offenders(&self) -> &[Offender] {
        &self.offenders
    }

    pub fn base_measure(&self) -> f64 {
        self.base.measure()
    }

    pub fn max_return_time(&self) -> u32 {
        self.max_return
    }

    pub fn return_times(&self) -> Vec<u32> {
        self.cells.iter().map(|c| c.return_time).collect()
    }

    fn locate_declared(&self, s: State) -> Option<usize> {
        let x = s.x;
        let lo = self.base.x.lo;
        let hi = self.base.x.hi;
        let slack = 1e-12 * (hi - lo);
        if x < lo || x > hi + slack {
            return None;
        }
        let i = self.by_position.partition_point(|&c| self.cells[c].bounds.x[0] <= x);
        let c = self.by_position[i.saturating_sub(1)];
        let b = self.cells[c].bounds.x;
        (x < b[1] || (x <= b[1] + slack && i == self.by_position.len())).then_some(c)
    }

    /// First return to the base, by iteration, up to the horizon.
    fn first_return(&self, s: State) -> Option<(u32, State)> {
        if !self.base.contains(s) {
            return None;
        }
        let mut y = s;
        for n in 1..=self.truncation.horizon as u32 {
            y = self.map.step(y);
            if self.base.contains(y) {
                return Some((n, y));
            }
        }
        None
    }

    /// Cell of `s` and its image under the induced map; `None` when `s` is
    /// outside the base or in the discarded part.
    pub fn induced(&self, s: State) -> Option<(usize, State)> {
        match self.kind {
            SchemeKind::Declared => {
                let c = self.locate_declared(s)?;
                Some((c, self.induced_eval(s, c)))
            }
            SchemeKind::FirstReturn => {
                let (r, y) = self.first_return(s)?;
                let cands = self.by_return.get(&r)?;
                let c = if cands.len() == 1 {
                    cands[0]
                } else {
                    *cands
                        .iter()
                        .min_by(|&&a, &&b| {
                            let da = dist_to(self.cells[a].bounds.x, s.x);
                            let db = dist_to(self.cells[b].bounds.x, s.x);
                            da.total_cmp(&db)
                        })
                        .expect("nonempty")
                };
                Some((c, y))
            }
            SchemeKind::Strips { strips, .. } => {
                let (r, y) = self.first_return(s)?;
                let j = ((s.theta * strips as f64) as usize).min(strips - 1);
                let c = self.strip_lookup[j * self.truncation.horizon + r as usize - 1];
                (c != u32::MAX).then_some((c as usize, y))
            }
        }
    }

    pub fn locate(&self, s: State) -> Option<usize> {
        match self.kind {
            SchemeKind::Declared => self.locate_declared(s),
            _ => self.induced(s).map(|(c, _)| c),
        }
    }

    /// Applies the base map `R(cell)` times.
    pub fn induced_eval(&self, s: State, cell: usize) -> State {
        let mut y = s;
        for _ in 0..self.cells[cell].return_time {
            y = self.map.step(y);
        }
        y
    }

    /// Symbols of `F^0 s, …, F^{len-1} s`.
    pub fn itinerary(&self, s: State, len: usize) -> Result<SymbolicItinerary> {
        let mut symbols = Vec::with_capacity(len);
        let mut y = s;
        for _ in 0..len {
            let (c, next) = self.induced(y).ok_or(Error::EscapedTruncation)?;
            symbols.push(c);
            y = next;
        }
        Ok(SymbolicItinerary { symbols })
    }

    /// Number of induced steps before the two orbits sit in distinct cells,
    /// or `cap` if they never separate within `cap` steps.
    pub fn separation_time(&self, x: State, y: State, cap: usize) -> Result<usize> {
        let (mut a, mut b) = (x, y);
        for n in 0..cap {
            let (ca, fa) = self.induced(a).ok_or(Error::EscapedTruncation)?;
            let (cb, fb) = self.induced(b).ok_or(Error::EscapedTruncation)?;
            if ca != cb {
                return Ok(n);
            }
            a = fa;
            b = fb;
        }
        Ok(cap)
    }

    /// Uniform point of the base drawn from `stream`.
    pub fn sample_base(&self, stream: &mut Stream) -> State {
        let theta = self.base.theta.map_or(0.0, |t| stream.uniform_in(t.lo, t.hi));
        let x = self.base.x;
        // (lo, hi] when the left end is open, [lo, hi) otherwise
        let u = stream.uniform();
        let xv = if x.lo_open { x.hi - u * x.len() } else { x.lo + u * x.len() };
        State { theta, x: xv }
    }

    /// Uniform point of a cell.
    pub fn sample_cell(&self, cell: usize, stream: &mut Stream) -> State {
        let b = self.cells[cell].bounds;
        let theta = b.theta.map_or(0.0, |t| stream.uniform_in(t[0], t[1]));
        State { theta, x: stream.uniform_in(b.x[0], b.x[1]) }
    }

    pub fn to_document(&self) -> SchemeDocument {
        SchemeDocument {
            map_id: self.map.id().to_string(),
            params: self.map.params(),
            base: self.base,
            scheme: self.kind,
            horizon: self.truncation.horizon,
            discarded_mass: self.truncation.discarded_mass,
            piecewise_affine: self.piecewise_affine,
            cells: self.cells.clone(),
            offenders: self.offenders.clone(),
        }
    }

    /// Rebuilds a scheme from its document and the map it was built for.
    pub fn from_document(doc: SchemeDocument, map: Arc<dyn DynamicalMap>) -> Result<Self> {
        if doc.map_id != map.id() {
            return Err(Error::InvalidParameter(format!(
                "document is for map '{}', got '{}'",
                doc.map_id,
                map.id()
            )));
        }
        if doc.cells.iter().enumerate().any(|(i, c)| c.symbol != i) {
            return Err(Error::InvalidParameter("cell symbols must be 0..n in order".into()));
        }
        let mut s = Self {
            map,
            base: doc.base,
            kind: doc.scheme,
            cells: doc.cells,
            truncation: Truncation { horizon: doc.horizon, discarded_mass: doc.discarded_mass },
            piecewise_affine: doc.piecewise_affine,
            offenders: doc.offenders,
            by_position: Vec::new(),
            by_return: HashMap::new(),
            strip_lookup: Vec::new(),
            max_return: 0,
        };
        s.index();
        Ok(s)
    }

    /// SHA-256 of the canonical JSON document.
    pub fn content_hash(&self) -> String {
        crate::io::sha256_hex(&serde_json::to_vec(&self.to_document()).unwrap_or_default())
    }
}

fn dist_to(b: [f64; 2], x: f64) -> f64 {
    if x < b[0] {
        b[0] - x
    } else if x > b[1] {
        x - b[1]
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicItinerary {
    pub symbols: Vec<usize>,
}

impl SymbolicItinerary {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// First-return scheme of a one-dimensional map on `base`.
///
/// Cells are found by pulling the base back through the branches: `W_k` is
/// the set outside the base whose orbit enters it for the first time after
/// exactly `k` steps, and the cells with return time `r` are the pieces of
/// the base mapped into `W_{r-1}`.
pub fn build_first_return_scheme(
    map: Arc<dyn DynamicalMap>,
    base: Interval,
    horizon: usize,
    discard_threshold: f64,
) -> Result<InducingScheme> {
    if horizon == 0 {
        return Err(Error::HorizonTooSmall("horizon 0 admits no cells".into()));
    }
    if map.state_dim() != 1 {
        return Err(Error::Unsupported("first-return construction needs a one-dimensional map".into()));
    }
    if !(base.len() > 0.0) {
        return Err(Error::InvalidParameter("base region has zero measure".into()));
    }
    let branches = map.branches();
    if branches.is_empty() {
        return Err(Error::Unsupported(format!("map '{}' exposes no monotone branches", map.id())));
    }
    let mut raw = Vec::new();
    let mut w: Vec<[f64; 2]> = vec![[base.lo, base.hi]];
    for r in 1..=horizon as u32 {
        let mut outside: Vec<[f64; 2]> = Vec::new();
        for iv in &w {
            for [a, b] in preimages(map.as_ref(), &branches, iv[0], iv[1]) {
                let (c0, c1) = (a.max(base.lo), b.min(base.hi));
                if c1 > c0 {
                    raw.push(RawCell { lo: c0, hi: c1, r });
                }
                if a < base.lo {
                    outside.push([a, b.min(base.lo)]);
                }
                if b > base.hi {
                    outside.push([a.max(base.hi), b]);
                }
            }
        }
        outside.retain(|iv| iv[1] > iv[0]);
        outside.sort_by(|a, b| a[0].total_cmp(&b[0]));
        if outside.len() > 100_000 {
            return Err(Error::Unsupported(format!(
                "first-return refinement produced {} intervals at return time {r}",
                outside.len()
            )));
        }
        w = outside;
        if w.is_empty() {
            break;
        }
    }
    raw.sort_by(|a, b| a.r.cmp(&b.r).then(a.lo.total_cmp(&b.lo)));
    let mut kept: f64 = 0.0;
    for c in raw.iter().rev() {
        kept += c.hi - c.lo;
    }
    let discarded = (base.len() - kept).max(0.0);
    if discarded > discard_threshold {
        return Err(Error::HorizonTooSmall(format!(
            "discarded mass {discarded:e} exceeds threshold {discard_threshold:e} at horizon {horizon}"
        )));
    }
    if raw.is_empty() {
        return Err(Error::HorizonTooSmall("no cell returns within the horizon".into()));
    }
    InducingScheme::assemble_1d(
        map,
        base,
        SchemeKind::FirstReturn,
        raw,
        Truncation { horizon, discarded_mass: discarded },
        false,
        true,
    )
}

/// Options for the θ-strip scheme of a skew product over `θ ↦ kθ mod 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripOptions {
    pub strips: usize,
    pub theta_factor: u64,
    pub horizon: usize,
    pub points_per_strip: usize,
    pub seed: u64,
    pub discard_threshold: f64,
}

/// First-return scheme over `S¹ × base_x`, with cells approximated by
/// `(strip, return time)` classes and measures estimated by Monte Carlo.
pub fn build_strip_scheme(map: Arc<dyn DynamicalMap>, base_x: Interval, opts: StripOptions) -> Result<InducingScheme> {
    let StripOptions { strips, theta_factor, horizon, points_per_strip, seed, discard_threshold } = opts;
    if horizon == 0 {
        return Err(Error::HorizonTooSmall("horizon 0 admits no cells".into()));
    }
    if map.state_dim() != 2 {
        return Err(Error::Unsupported("strip schemes need a skew product".into()));
    }
    let mut k = 1usize;
    while k < strips {
        k = k.saturating_mul(theta_factor as usize);
    }
    if strips == 0 || k != strips || theta_factor < 2 {
        return Err(Error::InvalidParameter(format!(
            "strip count {strips} must be a power of the base factor {theta_factor}"
        )));
    }
    if points_per_strip == 0 {
        return Err(Error::BudgetTooSmall("no Monte Carlo points per strip".into()));
    }
    let base = Region { theta: Some(Interval::half_open(0.0, 1.0)), x: base_x };
    const CHUNK: usize = 1 << 17;
    let chunks = points_per_strip.div_ceil(CHUNK);
    struct Tally {
        count: Vec<u32>,
        lo: Vec<f64>,
        hi: Vec<f64>,
    }
    let tallies: Vec<Tally> = map_tasks(strips * chunks, |task| {
        let (j, ch) = (task / chunks, task % chunks);
        let n = CHUNK.min(points_per_strip - ch * CHUNK);
        let mut t = Tally { count: vec![0; horizon + 1], lo: vec![f64::INFINITY; horizon], hi: vec![f64::NEG_INFINITY; horizon] };
        let mut rng = Stream::new(seed, Domain::Scheme, task as u64);
        for _ in 0..n {
            let theta = (j as f64 + rng.uniform()) / strips as f64;
            let x = base_x.hi - rng.uniform() * base_x.len();
            let start = State { theta, x };
            let mut y = start;
            let mut r = 0;
            for step in 1..=horizon {
                y = map.step(y);
                if base.contains(y) {
                    r = step;
                    break;
                }
            }
            if r == 0 {
                t.count[horizon] += 1;
            } else {
                t.count[r - 1] += 1;
                t.lo[r - 1] = t.lo[r - 1].min(x);
                t.hi[r - 1] = t.hi[r - 1].max(x);
            }
        }
        t
    });
    let strip_mass = base_x.len() / strips as f64;
    let mut cells = Vec::new();
    let mut strip_range = Vec::with_capacity(strips);
    let mut discarded = 0.0;
    for j in 0..strips {
        let mut count = vec![0u64; horizon + 1];
        let mut lo = vec![f64::INFINITY; horizon];
        let mut hi = vec![f64::NEG_INFINITY; horizon];
        for t in &tallies[j * chunks..(j + 1) * chunks] {
            for r in 0..=horizon {
                count[r] += t.count[r] as u64;
            }
            for r in 0..horizon {
                lo[r] = lo[r].min(t.lo[r]);
                hi[r] = hi[r].max(t.hi[r]);
            }
        }
        let start = cells.len();
        for r in 0..horizon {
            if count[r] == 0 {
                continue;
            }
            cells.push(Cell {
                symbol: cells.len(),
                bounds: CellBounds {
                    theta: Some([j as f64 / strips as f64, (j + 1) as f64 / strips as f64]),
                    x: [lo[r], hi[r]],
                },
                return_time: r as u32 + 1,
                measure: count[r] as f64 / points_per_strip as f64 * strip_mass,
                image: SymbolSet::default(),
                image_measure: 0.0,
                aligned: true,
                injective: true,
            });
        }
        strip_range.push([start as u32, cells.len() as u32]);
        discarded += count[horizon] as f64 / points_per_strip as f64 * strip_mass;
    }
    if discarded > discard_threshold {
        return Err(Error::HorizonTooSmall(format!(
            "discarded mass {discarded:e} exceeds threshold {discard_threshold:e} at horizon {horizon}"
        )));
    }
    for c in cells.iter_mut() {
        let j = (c.bounds.theta.expect("strip")[0] * strips as f64).round() as usize;
        let mut width = 1usize;
        for _ in 0..c.return_time {
            width = width.saturating_mul(theta_factor as usize);
            if width >= strips {
                break;
            }
        }
        let covered: Vec<usize> = if width >= strips {
            (0..strips).collect()
        } else {
            (0..width).map(|i| (j * width + i) % strips).collect()
        };
        c.image = SymbolSet::from_ranges(covered.iter().map(|&s| strip_range[s]).collect());
        c.image_measure = covered.len() as f64 * strip_mass;
    }
    let mut s = InducingScheme {
        map,
        base,
        kind: SchemeKind::Strips { strips, theta_factor },
        cells,
        truncation: Truncation { horizon, discarded_mass: discarded },
        piecewise_affine: false,
        offenders: Vec::new(),
        by_position: Vec::new(),
        by_return: HashMap::new(),
        strip_lookup: Vec::new(),
        max_return: 0,
    };
    s.index();
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSizes {
    pub requested: usize,
    pub gibbs_pairs: usize,
    pub expanding_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WgmCertificate {
    pub markov_ok: bool,
    pub offenders: Vec<Offender>,
    pub injective_ok: bool,
    pub non_injective_cells: Vec<usize>,
    pub long_branch_delta0: f64,
    pub gibbs_constant: f64,
    pub gibbs_beta: f64,
    pub gibbs_coverage: f64,
    pub expanding_c: f64,
    pub expanding_beta: f64,
    pub sample_sizes: SampleSizes,
    pub separability: String,
}

/// Floor below which log-Jacobian differences count as rounding noise.
const JACOBIAN_NOISE: f64 = 1e-10;

fn quantile(mut v: Vec<f64>, q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let k = ((v.len() as f64 * q).ceil() as usize).clamp(1, v.len()) - 1;
    v[k]
}

/// Fits `value ≤ C β^s`: β from a log-linear regression, C as the 95% quantile.
fn envelope(pairs: &[(usize, f64)], cap: usize) -> (f64, f64, f64) {
    let pts: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(s, v)| *s < cap && *v > JACOBIAN_NOISE)
        .map(|&(s, v)| (s as f64, v.ln()))
        .collect();
    let beta = fit_line(&pts).map(|l| l.slope.exp()).unwrap_or(0.5).clamp(1e-6, 1.0 - 1e-6);
    let scaled: Vec<f64> = pairs.iter().map(|&(s, v)| v / beta.powi(s as i32)).collect();
    let c = quantile(scaled, 0.95);
    let coverage = if pairs.is_empty() {
        1.0
    } else {
        pairs.iter().filter(|&&(s, v)| v <= c * beta.powi(s as i32) * (1.0 + 1e-12)).count() as f64 / pairs.len() as f64
    };
    (c, beta, coverage)
}

fn log_jacobian_induced(map: &dyn DynamicalMap, s: State, r: u32) -> Option<f64> {
    let mut y = s;
    let mut acc = 0.0;
    for _ in 0..r {
        acc += map.log_jacobian(y)?;
        y = map.step(y);
    }
    Some(acc)
}

/// Empirical check of the Markov, long-branch, Gibbs and expansion
/// properties. Separability is assumed from the construction.
pub fn verify_wgm(scheme: &InducingScheme, samples: usize, cap: usize, seed: u64) -> Result<WgmCertificate> {
    if scheme.is_empty() {
        return Err(Error::InvalidParameter("scheme has no live cells".into()));
    }
    let map = scheme.map().as_ref();
    let probe = scheme.sample_cell(0, &mut Stream::new(seed, Domain::Wgm, u64::MAX));
    if map.log_jacobian(probe).is_none() {
        return Err(Error::JacobianUnavailable(map.id().to_string()));
    }
    // (s(Fx,Fy), |log J x - log J y|, d(x,y))
    let obs: Vec<Option<(usize, f64, f64)>> = map_tasks(samples, |i| {
        let mut rng = Stream::new(seed, Domain::Wgm, i as u64);
        let x = scheme.sample_base(&mut rng);
        let (c, fx) = scheme.induced(x)?;
        let cell = scheme.cell(c);
        let k = rng.below(40) as i32;
        let shrink = 0.5f64.powi(k);
        let mut y = x;
        y.x = x.x + (rng.uniform() - 0.5) * (cell.bounds.x[1] - cell.bounds.x[0]) * shrink;
        if let Some(t) = cell.bounds.theta {
            y.theta = (x.theta + (rng.uniform() - 0.5) * (t[1] - t[0]) * shrink).rem_euclid(1.0);
        }
        let (cy, fy) = scheme.induced(y)?;
        if cy != c || y == x {
            return None;
        }
        let r = cell.return_time;
        let jx = log_jacobian_induced(map, x, r)?;
        let jy = log_jacobian_induced(map, y, r)?;
        let s = scheme.separation_time(fx, fy, cap).ok()?;
        Some((s, (jx - jy).abs(), map.metric(x, y)))
    });
    let obs: Vec<(usize, f64, f64)> = obs.into_iter().flatten().collect();
    let gibbs: Vec<(usize, f64)> = obs.iter().map(|o| (o.0, o.1)).collect();
    let (gibbs_constant, gibbs_beta, gibbs_coverage) = if gibbs.iter().all(|g| g.1 <= JACOBIAN_NOISE) {
        (gibbs.iter().map(|g| g.1).fold(0.0, f64::max), 0.5, 1.0)
    } else {
        envelope(&gibbs, cap)
    };
    // x and y share a cell, so s(x,y) = 1 + s(Fx,Fy)
    let expanding: Vec<(usize, f64)> = obs.iter().map(|o| ((o.0 + 1).min(cap), o.2)).collect();
    let (expanding_c, expanding_beta, _) = envelope(&expanding, cap);
    let non_injective: Vec<usize> = scheme.cells().iter().filter(|c| !c.injective).map(|c| c.symbol).collect();
    Ok(WgmCertificate {
        markov_ok: scheme.offenders().is_empty(),
        offenders: scheme.offenders().to_vec(),
        injective_ok: non_injective.is_empty(),
        non_injective_cells: non_injective,
        long_branch_delta0: scheme.cells().iter().map(|c| c.image_measure).fold(f64::INFINITY, f64::min),
        gibbs_constant,
        gibbs_beta,
        gibbs_coverage,
        expanding_c,
        expanding_beta,
        sample_sizes: SampleSizes { requested: samples, gibbs_pairs: gibbs.len(), expanding_pairs: expanding.len() },
        separability: "assumed from construction (monotone expanding branches); not tested".into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub horizon: usize,
    pub base_measure: f64,
    pub discarded_mass: f64,
    /// `m{R > n}` for `n = 0..=horizon`.
    pub counts: Vec<f64>,
    /// `m{R̂ > n} = Σ_{ℓ>n} m{R > ℓ}`, summed up to the horizon.
    pub hat_counts: Vec<f64>,
    pub fit: Option<RateFit>,
    pub fit_error: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TailOptions {
    pub window: Option<FitWindow>,
    pub family: Option<&'static str>,
}

/// Default tail window `[10, horizon/10]`; short horizons use all of `[1, horizon]`.
pub fn default_tail_window(horizon: usize) -> FitWindow {
    let hi = horizon as f64 / 10.0;
    if hi >= 10.0 * 10f64.sqrt() {
        FitWindow::new(10.0, hi)
    } else {
        FitWindow::new(1.0, horizon as f64)
    }
}

pub fn estimate_tail(scheme: &InducingScheme) -> TailEstimate {
    estimate_tail_with(scheme, TailOptions::default())
}

pub fn estimate_tail_with(scheme: &InducingScheme, opts: TailOptions) -> TailEstimate {
    let h = scheme.truncation().horizon.max(scheme.max_return_time() as usize);
    let mut by_r = vec![0.0; h + 1];
    for c in scheme.cells() {
        by_r[c.return_time as usize] += c.measure;
    }
    let discarded = scheme.truncation().discarded_mass;
    let mut counts = vec![0.0; h + 1];
    let mut acc = discarded;
    for n in (0..=h).rev() {
        counts[n] = acc;
        acc += by_r[n];
    }
    let mut hat_counts = vec![0.0; h + 1];
    let mut acc = 0.0;
    for n in (0..=h).rev() {
        hat_counts[n] = acc;
        acc += counts[n];
    }
    let window = opts.window.unwrap_or_else(|| default_tail_window(h));
    let pts: Vec<(f64, f64)> = counts.iter().enumerate().skip(1).map(|(n, &c)| (n as f64, c)).collect();
    let (fit, fit_error) = match fit_rate(&pts, opts.family, window) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    TailEstimate {
        horizon: h,
        base_measure: scheme.base_measure(),
        discarded_mass: discarded,
        counts,
        hat_counts,
        fit,
        fit_error,
    }
}

impl TailEstimate {
    /// CSV with columns `n, m_R_gt_n, m_Rhat_gt_n`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,m_R_gt_n,m_Rhat_gt_n\n");
        for n in 0..self.counts.len() {
            out.push_str(&format!("{},{},{}\n", n, self.counts[n], self.hat_counts[n]));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrabilityReport {
    pub r_mean: f64,
    pub finite: bool,
    pub exponent: Option<f64>,
    pub remainder: f64,
    pub budget: f64,
    pub near_budget: bool,
}

/// Mean return time by the tail-sum formula plus a fitted bound on the
/// mass beyond the horizon. `budget_fraction` scales the remainder budget
/// relative to the mean.
pub fn integrability_report(tail: &TailEstimate, budget_fraction: f64) -> IntegrabilityReport {
    let r_mean: f64 = tail.counts.iter().sum();
    let h = tail.horizon as f64;
    let budget = budget_fraction * r_mean;
    let (remainder, exponent, summable) = if tail.discarded_mass == 0.0 {
        (0.0, tail.fit.as_ref().map(|f| f.rate()), true)
    } else {
        match &tail.fit {
            None => (f64::INFINITY, None, false),
            Some(f) => {
                let v = |k: &str| f.param(k).map_or(f64::NAN, |p| p.value);
                match f.family {
                    crate::stats::fit::Family::Polynomial => {
                        let p = v("p");
                        if p > 1.0 {
                            (v("prefactor") * h.powf(1.0 - p) / (p - 1.0), Some(p), true)
                        } else {
                            (f64::INFINITY, Some(p), false)
                        }
                    }
                    crate::stats::fit::Family::Exponential => {
                        let c = v("c");
                        (v("prefactor") * (-c * h).exp() / c, Some(c), true)
                    }
                    crate::stats::fit::Family::Stretched => {
                        let mut sum = 0.0;
                        let mut n = h + 1.0;
                        for _ in 0..10_000_000 {
                            let t = f.predict(n);
                            sum += t;
                            if t < 1e-18 {
                                break;
                            }
                            n += 1.0;
                        }
                        (sum, Some(v("a")), true)
                    }
                }
            }
        }
    };
    IntegrabilityReport {
        r_mean,
        finite: summable && remainder <= budget,
        exponent,
        remainder,
        budget,
        near_budget: remainder > 0.5 * budget,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_sets_merge_and_query() {
        let s = SymbolSet::from_symbols(vec![5, 1, 2, 3, 9]);
        assert_eq!(s.ranges(), &[[1, 4], [5, 6], [9, 10]]);
        assert!(s.contains(2) && !s.contains(4) && s.contains(9));
        assert_eq!(s.len(), 5);
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![1, 2, 3, 5, 9]);
    }

    #[test]
    fn default_window_follows_horizon() {
        assert_eq!(default_tail_window(10_000), FitWindow::new(10.0, 1000.0));
        assert_eq!(default_tail_window(50), FitWindow::new(1.0, 50.0));
    }
}
