//! Base dynamical systems behind one interface.

mod affine;
mod counterexample;
mod doubling;
mod lsv;
mod registry;
mod skew;

pub use affine::{AffineCellSpec, AffineMarkovMap};
pub use counterexample::CounterexampleMap;
pub use doubling::DoublingMap;
pub use lsv::{lsv_left, LsvMap};
pub use registry::{make_affine_scheme, make_counterexample_scheme, SchemeOptions, System, SystemFactory, SystemRegistry};
pub use skew::{AlphaFn, SkewProductMap, SkewProductParams};

use serde::{Deserialize, Serialize};

use crate::rng::splitmix64;

/// A point of phase space. One-dimensional maps leave `theta` at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub theta: f64,
    pub x: f64,
}

impl State {
    pub fn new(x: f64) -> Self {
        Self { theta: 0.0, x }
    }

    pub fn skew(theta: f64, x: f64) -> Self {
        Self { theta, x }
    }
}

/// An interval with explicit endpoint conventions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    #[serde(default)]
    pub lo_open: bool,
    #[serde(default = "default_true")]
    pub hi_open: bool,
}

fn default_true() -> bool {
    true
}

impl Interval {
    /// Half-open `[lo, hi)`.
    pub fn half_open(lo: f64, hi: f64) -> Self {
        Self { lo, hi, lo_open: false, hi_open: true }
    }

    /// Left-open `(lo, hi]`.
    pub fn left_open(lo: f64, hi: f64) -> Self {
        Self { lo, hi, lo_open: true, hi_open: false }
    }

    pub fn closed(lo: f64, hi: f64) -> Self {
        Self { lo, hi, lo_open: false, hi_open: false }
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        let above = if self.lo_open { x > self.lo } else { x >= self.lo };
        let below = if self.hi_open { x < self.hi } else { x <= self.hi };
        above && below
    }
}

/// A product region; `theta` is `None` for one-dimensional systems.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Interval>,
    pub x: Interval,
}

impl Region {
    pub fn interval(x: Interval) -> Self {
        Self { theta: None, x }
    }

    pub fn measure(&self) -> f64 {
        self.x.len() * self.theta.map_or(1.0, |t| t.len())
    }

    pub fn contains(&self, s: State) -> bool {
        self.x.contains(s.x) && self.theta.is_none_or(|t| t.contains(s.theta))
    }
}

/// A deterministic map of phase space.
///
/// `eval` is the exact formula. `step` is what orbit simulation uses; it
/// differs from `eval` only for maps whose floating-point iteration
/// degenerates (dyadic expansions lose one bit per step and would collapse
/// onto zero). Those maps refill the lost low-order bits from a hash of the
/// state, which keeps every step within one ulp of the true map.
pub trait DynamicalMap: Send + Sync + std::fmt::Debug {
    fn id(&self) -> &'static str;

    fn description(&self) -> String;

    fn params(&self) -> serde_json::Value;

    fn state_dim(&self) -> usize;

    fn phase_space(&self) -> Region;

    fn eval(&self, s: State) -> State;

    fn step(&self, s: State) -> State {
        self.eval(s)
    }

    fn metric(&self, a: State, b: State) -> f64 {
        (a.x - b.x).abs()
    }

    /// Log of the Jacobian with respect to the reference measure.
    fn log_jacobian(&self, _s: State) -> Option<f64> {
        None
    }

    /// Monotone branch domains of a one-dimensional map, in order.
    fn branches(&self) -> Vec<Interval> {
        Vec::new()
    }

    /// The formula of branch `b`, extended continuously to its closure.
    fn eval_branch(&self, _b: usize, x: f64) -> f64 {
        self.eval(State::new(x)).x
    }
}

const TWO53: f64 = 9_007_199_254_740_992.0;
const MASK53: u64 = (1u64 << 53) - 1;
const REFILL_KEY: u64 = 0x5851_F42D_4C95_7F2D;

/// `x ↦ 2^bits x mod 1` on the 2^-53 lattice with the vacated low bits
/// refilled from a hash of the current lattice point.
#[inline]
pub fn dyadic_refill(x: f64, bits: u32) -> f64 {
    let u = (x * TWO53) as u64 & MASK53;
    let shifted = (u << bits) & MASK53;
    let fill = splitmix64(u ^ REFILL_KEY) & ((1u64 << bits) - 1);
    (shifted | fill) as f64 / TWO53
}

/// `a + t·slope` for `t` in `[0, span)`, with the low bits that the
/// expansion pushes out replaced by a hash of `t`, so long orbits keep full
/// precision. The result stays inside `[a, a + span·slope)`.
#[inline]
pub fn affine_refill(a: f64, t: f64, slope: f64, span: f64) -> f64 {
    if slope <= 1.0 {
        return a + t * slope;
    }
    let u = (splitmix64(t.to_bits() ^ REFILL_KEY) >> 11) as f64 / TWO53;
    let y = a + (t + u * span * f64::EPSILON) * slope;
    let end = a + span * slope;
    if y >= end {
        f64::from_bits(end.to_bits() - 1).max(a)
    } else {
        y
    }
}

/// One-sided evaluation at a point that may sit on a branch boundary.
/// `from_below` selects the branch reached by approaching `x` from the left.
pub fn eval_limit(map: &dyn DynamicalMap, branches: &[Interval], x: f64, from_below: bool) -> (f64, bool) {
    let idx = branches
        .iter()
        .position(|b| if from_below { b.lo < x && x <= b.hi } else { b.lo <= x && x < b.hi })
        .or_else(|| branches.iter().position(|b| b.lo <= x && x <= b.hi))
        .unwrap_or(if x <= branches[0].lo { 0 } else { branches.len() - 1 });
    let b = branches[idx];
    let y = map.eval_branch(idx, x);
    let increasing = map.eval_branch(idx, b.lo) <= map.eval_branch(idx, b.hi);
    (y, if increasing { from_below } else { !from_below })
}

/// Iterates `eval_limit` `n` times.
pub fn iterate_limit(map: &dyn DynamicalMap, branches: &[Interval], x: f64, n: u32, from_below: bool) -> f64 {
    let mut y = x;
    let mut side = from_below;
    for _ in 0..n {
        let (ny, ns) = eval_limit(map, branches, y, side);
        y = ny;
        side = ns;
    }
    y
}

/// Solves `eval_branch(b, x) = y` on branch `b` by bisection to full precision.
pub fn invert_branch(map: &dyn DynamicalMap, b: usize, dom: Interval, y: f64) -> Option<f64> {
    let (mut lo, mut hi) = (dom.lo, dom.hi);
    let (flo, fhi) = (map.eval_branch(b, lo), map.eval_branch(b, hi));
    let increasing = flo <= fhi;
    let (ymin, ymax) = if increasing { (flo, fhi) } else { (fhi, flo) };
    if y < ymin || y > ymax {
        return None;
    }
    if y == flo {
        return Some(lo);
    }
    if y == fhi {
        return Some(hi);
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Some(mid);
        }
        let fm = map.eval_branch(b, mid);
        if (fm < y) == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// A monotone piece of the image of an interval under `n` iterates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImagePiece {
    /// Sub-interval of the source interval.
    pub source: [f64; 2],
    /// Its image, as an ordered pair.
    pub image: [f64; 2],
}

#[derive(Clone)]
struct Tracked {
    source: [f64; 2],
    cur: [f64; 2],
    increasing: bool,
    path: Vec<(usize, u32)>,
}

fn branch_increasing(map: &dyn DynamicalMap, b: usize, dom: Interval) -> bool {
    map.eval_branch(b, dom.lo) <= map.eval_branch(b, dom.hi)
}

fn compose(map: &dyn DynamicalMap, path: &[(usize, u32)], t: f64) -> f64 {
    let mut y = t;
    for &(b, c) in path {
        for _ in 0..c {
            y = map.eval_branch(b, y);
        }
    }
    y
}

fn advance(map: &dyn DynamicalMap, t: &mut Tracked, b: usize, c0: f64, c1: f64, inc: bool) {
    let (y0, y1) = (map.eval_branch(b, c0), map.eval_branch(b, c1));
    t.cur = [y0.min(y1), y0.max(y1)];
    if !inc {
        t.increasing = !t.increasing;
    }
    match t.path.last_mut() {
        Some((pb, c)) if *pb == b => *c += 1,
        _ => t.path.push((b, 1)),
    }
}

/// Source point whose image under `path` is `y`, by bisection on `source`.
fn pull_back(map: &dyn DynamicalMap, t: &Tracked, y: f64) -> f64 {
    let (mut lo, mut hi) = (t.source[0], t.source[1]);
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return mid;
        }
        let g = compose(map, &t.path, mid);
        if (g < y) == t.increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// Image of `[lo, hi]` under `n` iterates, split into monotone pieces.
///
/// The interval is pushed forward one step at a time and cut wherever it
/// straddles a branch boundary. Pieces whose source is shorter than
/// `1e-10` of the interval are absorbed by their neighbour; they only arise
/// from rounding at boundaries that the exact orbit touches but does not
/// cross.
pub fn image_pieces(map: &dyn DynamicalMap, branches: &[Interval], lo: f64, hi: f64, n: u32) -> Vec<ImagePiece> {
    let sliver = (hi - lo) * 1e-10;
    let incr: Vec<bool> = branches.iter().enumerate().map(|(b, d)| branch_increasing(map, b, *d)).collect();
    let mut work = vec![Tracked { source: [lo, hi], cur: [lo, hi], increasing: true, path: Vec::new() }];
    for _ in 0..n {
        let mut spawned = Vec::new();
        let mut i = 0;
        while i < work.len() {
            let w = &work[i];
            let mut first = branches.partition_point(|b| b.hi <= w.cur[0]).min(branches.len() - 1);
            let mut last = first;
            while last + 1 < branches.len() && branches[last + 1].lo < w.cur[1] {
                last += 1;
            }
            // rounding overshoot past a boundary: keep the dominant branch
            let len = w.cur[1] - w.cur[0];
            if last > first && branches[first].hi - w.cur[0] <= 1e-7 * len {
                first += 1;
            }
            if last > first && w.cur[1] - branches[last].lo <= 1e-7 * len {
                last -= 1;
            }
            if first == last {
                let w = &mut work[i];
                advance(map, w, first, w.cur[0], w.cur[1], incr[first]);
                i += 1;
                continue;
            }
            let w = work.swap_remove(i);
            let mut cuts = vec![w.cur[0]];
            for b in &branches[first + 1..=last] {
                cuts.push(b.lo);
            }
            cuts.push(w.cur[1]);
            let k_last = cuts.len() - 1;
            let srcs: Vec<f64> = (0..cuts.len())
                .map(|k| {
                    let lo_end = if w.increasing { w.source[0] } else { w.source[1] };
                    let hi_end = if w.increasing { w.source[1] } else { w.source[0] };
                    if k == 0 {
                        lo_end
                    } else if k == k_last {
                        hi_end
                    } else {
                        pull_back(map, &w, cuts[k])
                    }
                })
                .collect();
            // (branch, cur_lo, cur_hi, src_lo, src_hi)
            let mut segs: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
            for (k, b) in (first..=last).enumerate() {
                let (s0, s1) = (srcs[k].min(srcs[k + 1]), srcs[k].max(srcs[k + 1]));
                let s = (b, cuts[k], cuts[k + 1], s0, s1);
                if let Some(prev) = segs.last_mut() {
                    let prev_short = prev.4 - prev.3 <= sliver;
                    let cur_short = s.4 - s.3 <= sliver;
                    if cur_short || prev_short {
                        let keep = if cur_short { prev.0 } else { s.0 };
                        *prev = (keep, prev.1, s.2, prev.3.min(s.3), prev.4.max(s.4));
                        continue;
                    }
                }
                segs.push(s);
            }
            for (b, c0, c1, s0, s1) in segs {
                let mut t = Tracked { source: [s0, s1], cur: [c0, c1], increasing: w.increasing, path: w.path.clone() };
                advance(map, &mut t, b, c0, c1, incr[b]);
                spawned.push(t);
            }
        }
        work.append(&mut spawned);
    }
    work.sort_by(|a, b| a.source[0].total_cmp(&b.source[0]));
    work.into_iter().map(|w| ImagePiece { source: w.source, image: w.cur }).collect()
}

/// Preimage of `[a, b]` under each branch, as intervals.
pub fn preimages(map: &dyn DynamicalMap, branches: &[Interval], a: f64, b: f64) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    for (i, d) in branches.iter().enumerate() {
        let (f0, f1) = (map.eval_branch(i, d.lo), map.eval_branch(i, d.hi));
        let (r0, r1) = (f0.min(f1), f0.max(f1));
        let (c0, c1) = (a.max(r0), b.min(r1));
        if c1 <= c0 {
            continue;
        }
        let (Some(x0), Some(x1)) = (invert_branch(map, i, *d, c0), invert_branch(map, i, *d, c1)) else {
            continue;
        };
        let (lo, hi) = (x0.min(x1), x0.max(x1));
        if hi > lo {
            out.push([lo, hi]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refill_keeps_lattice_and_high_bits() {
        let x = 0.3;
        let y = dyadic_refill(x, 1);
        assert!((y - 0.6).abs() < 2.0 / TWO53);
        let z = dyadic_refill(0.75, 2);
        assert!(z < 4.0 / TWO53);
    }

    #[test]
    fn refilled_orbit_does_not_collapse() {
        let mut x = 0.25;
        for _ in 0..500 {
            x = dyadic_refill(x, 1);
        }
        assert!(x > 0.0 && x < 1.0);
    }

    #[test]
    fn intervals_respect_conventions() {
        let i = Interval::left_open(0.5, 1.0);
        assert!(!i.contains(0.5) && i.contains(1.0));
        let j = Interval::half_open(0.0, 0.5);
        assert!(j.contains(0.0) && !j.contains(0.5));
    }
}
