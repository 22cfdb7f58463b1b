//! Survival of the simultaneous return over sampled pairs, the exact
//! product-chain survival on an Ulam grid, and the matching-bound report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::map_tasks;
use crate::rng::{Domain, Stream};
use crate::stats::dist::{wilson, Z95};
use crate::stats::fit::{fit_rate, FitWindow, RateFit};
use crate::tower::{push_density, tv_distance, DiscretizedDensity, Tower, TransferOperator};

use super::pairs::{DensityPairs, PairSampler};
use super::trace::{trace_from, CouplingTrace, TraceStop};
use super::StoppingSchedule;

const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurvivalOptions {
    pub pairs: usize,
    pub horizon: usize,
    pub max_index: usize,
    /// Number of coupling blocks `S_i` to follow; `0` stops each pair at `S`.
    pub block_cap: usize,
    /// Largest `k` for the stratified success frequencies.
    pub strata: usize,
    /// Largest `k` for the increment tails.
    pub increment_strata: usize,
}

impl Default for SurvivalOptions {
    fn default() -> Self {
        Self { pairs: 10_000, horizon: 200, max_index: 1_000_000, block_cap: 0, strata: 10, increment_strata: 5 }
    }
}

/// Conditional success frequency of `{S = τ_k}` given `S > τ_{k−1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub k: usize,
    pub at_risk: u64,
    pub successes: u64,
    pub frequency: f64,
    pub ci: [f64; 2],
}

/// `P(τ_k − τ_{k−1} > n + n₀)` for `n = 0..=horizon`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementTail {
    pub k: usize,
    pub count: u64,
    pub tail: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub sampler: String,
    pub horizon: usize,
    pub n0: u32,
    /// Kaplan–Meier estimate of `P{S > n}`, `n = 0..=horizon`.
    pub values: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
    pub std_err: Vec<f64>,
    pub sample_count: usize,
    pub censored: usize,
    pub escaped: usize,
    pub strata: Vec<Stratum>,
    pub increments: Vec<IncrementTail>,
    /// `P{S_i ≤ n < S_{i+1}}` for `i = 0..=block_cap` (`S_0 = 0`), the last row
    /// collecting every `i ≥ block_cap`.
    pub block_counts: Option<Vec<Vec<f64>>>,
    /// Kaplan–Meier `P{S_{k+1} − S_k > n}` for `k = 1..block_cap`.
    pub block_gaps: Option<Vec<Vec<f64>>>,
}

impl SurvivalCurve {
    /// Smallest stratified success frequency over `k = 2..`.
    pub fn epsilon0(&self) -> Option<f64> {
        self.strata.iter().filter(|s| s.at_risk > 0).map(|s| s.frequency).reduce(f64::min)
    }

    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = (0..self.values.len())
            .map(|n| {
                vec![n.to_string(), self.values[n].to_string(), self.ci_lo[n].to_string(), self.ci_hi[n].to_string()]
            })
            .collect();
        crate::io::csv(&["n", "value", "ci_lo", "ci_hi"], &rows)
    }
}

/// Integer tallies of one chunk of pairs; summed in chunk order.
#[derive(Clone, Default)]
struct Tally {
    events: Vec<u64>,
    censor: Vec<u64>,
    at_risk: Vec<u64>,
    success: Vec<u64>,
    incr: Vec<Vec<u64>>,
    incr_n: Vec<u64>,
    occupancy: Vec<Vec<u64>>,
    gap_events: Vec<Vec<u64>>,
    gap_censor: Vec<Vec<u64>>,
    censored: usize,
    escaped: usize,
}

impl Tally {
    fn new(o: &SurvivalOptions) -> Self {
        let h = o.horizon + 1;
        let blocks = o.block_cap;
        Self {
            events: vec![0; h],
            censor: vec![0; h],
            at_risk: vec![0; o.strata + 1],
            success: vec![0; o.strata + 1],
            incr: vec![vec![0; h]; o.increment_strata + 1],
            incr_n: vec![0; o.increment_strata + 1],
            occupancy: if blocks > 0 { vec![vec![0; h]; blocks + 1] } else { Vec::new() },
            gap_events: vec![vec![0; h]; blocks.saturating_sub(1)],
            gap_censor: vec![vec![0; h]; blocks.saturating_sub(1)],
            censored: 0,
            escaped: 0,
        }
    }

    fn add(&mut self, o: &Tally) {
        fn add_v(a: &mut [u64], b: &[u64]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        add_v(&mut self.events, &o.events);
        add_v(&mut self.censor, &o.censor);
        add_v(&mut self.at_risk, &o.at_risk);
        add_v(&mut self.success, &o.success);
        add_v(&mut self.incr_n, &o.incr_n);
        for (a, b) in self.incr.iter_mut().zip(&o.incr) {
            add_v(a, b);
        }
        for (a, b) in self.occupancy.iter_mut().zip(&o.occupancy) {
            add_v(a, b);
        }
        for (a, b) in self.gap_events.iter_mut().zip(&o.gap_events) {
            add_v(a, b);
        }
        for (a, b) in self.gap_censor.iter_mut().zip(&o.gap_censor) {
            add_v(a, b);
        }
        self.censored += o.censored;
        self.escaped += o.escaped;
    }

    fn record(&mut self, tr: &CouplingTrace, n0: u32, opts: &SurvivalOptions) {
        let h = opts.horizon as u64;
        match tr.s_value {
            Some(s) if s <= h => self.events[s as usize] += 1,
            Some(_) => {}
            None => {
                if tr.reached < h {
                    self.censor[tr.reached as usize] += 1;
                    self.censored += 1;
                }
                if tr.stop == TraceStop::Escaped {
                    self.escaped += 1;
                }
            }
        }
        // τ_k was reached with S > τ_{k−1} for every k < taus.len()
        for k in 2..tr.taus.len().min(opts.strata + 1) {
            self.at_risk[k] += 1;
            if tr.s_index == Some(k) {
                self.success[k] += 1;
            }
        }
        for (i, v) in tr.hat_increments(n0).into_iter().enumerate() {
            let k = i + 1;
            if k > opts.increment_strata {
                break;
            }
            self.incr_n[k] += 1;
            // P(R̂_k > n) for n < v
            let top = (v as usize).min(opts.horizon + 1);
            for c in &mut self.incr[k][..top] {
                *c += 1;
            }
        }
    }
}

/// Kaplan–Meier curve with Greenwood standard errors from event and
/// censoring counts at each time.
fn kaplan_meier(events: &[u64], censor: &[u64], total: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut s = 1.0;
    let mut green = 0.0;
    let mut risk = total as f64;
    let mut values = Vec::with_capacity(events.len());
    let mut se = Vec::with_capacity(events.len());
    let mut eff = Vec::with_capacity(events.len());
    for t in 0..events.len() {
        let d = events[t] as f64;
        if risk > 0.0 && d > 0.0 {
            s *= 1.0 - d / risk;
            if risk > d {
                green += d / (risk * (risk - d));
            }
        }
        values.push(s);
        let var = s * s * green;
        se.push(var.sqrt());
        // effective sample size for a Wilson interval
        eff.push(if var > 0.0 { s * (1.0 - s) / var } else { risk.max(1.0) });
        risk -= d + censor[t] as f64;
    }
    (values, se, eff)
}

fn check_opts(opts: &SurvivalOptions) -> Result<()> {
    if opts.pairs == 0 || opts.horizon == 0 || opts.max_index < 2 {
        return Err(Error::InvalidParameter("pairs, horizon must be positive and max_index at least 2".into()));
    }
    Ok(())
}

/// Monte Carlo survival of `S` over independent pairs from `sampler`.
///
/// Pair `i` is drawn from stream `(seed, Pairs, i)`, so any pair can be
/// replayed alone with [`replay_pair`].
pub fn survival_curve(
    tower: &Tower,
    schedule: &StoppingSchedule,
    sampler: &dyn PairSampler,
    seed: u64,
    opts: &SurvivalOptions,
) -> Result<SurvivalCurve> {
    check_opts(opts)?;
    let n0 = schedule.n0;
    let chunks = opts.pairs.div_ceil(CHUNK);
    let parts = map_tasks(chunks, |c| -> Result<Tally> {
        let mut tally = Tally::new(opts);
        for i in c * CHUNK..((c + 1) * CHUNK).min(opts.pairs) {
            let mut st = Stream::new(seed, Domain::Pairs, i as u64);
            let pair = sampler.sample(tower, &mut st)?;
            let tr = trace_from(tower, n0, pair, 0, opts.max_index, opts.horizon as u64);
            tally.record(&tr, n0, opts);
            if opts.block_cap > 0 {
                blocks(tower, n0, &tr, opts, &mut tally);
            }
        }
        Ok(tally)
    });
    let mut tally = Tally::new(opts);
    for p in parts {
        tally.add(&p?);
    }
    let total = opts.pairs as u64;
    let (values, std_err, eff) = kaplan_meier(&tally.events, &tally.censor, total);
    let (ci_lo, ci_hi): (Vec<f64>, Vec<f64>) = values
        .iter()
        .zip(&eff)
        .map(|(&v, &n)| {
            let [a, b] = wilson(v * n, n, Z95);
            (a, b)
        })
        .unzip();
    let strata = (2..=opts.strata)
        .map(|k| {
            let (r, s) = (tally.at_risk[k], tally.success[k]);
            Stratum {
                k,
                at_risk: r,
                successes: s,
                frequency: if r > 0 { s as f64 / r as f64 } else { 0.0 },
                ci: wilson(s as f64, r as f64, Z95),
            }
        })
        .collect();
    let increments = (1..=opts.increment_strata)
        .map(|k| {
            let n = tally.incr_n[k];
            IncrementTail {
                k,
                count: n,
                tail: tally.incr[k].iter().map(|&c| if n > 0 { c as f64 / n as f64 } else { 0.0 }).collect(),
            }
        })
        .collect();
    let (block_counts, block_gaps) = if opts.block_cap > 0 {
        let occ = tally.occupancy.iter().map(|row| row.iter().map(|&c| c as f64 / total as f64).collect()).collect();
        let gaps = tally
            .gap_events
            .iter()
            .zip(&tally.gap_censor)
            .map(|(e, c)| {
                let n = e.iter().sum::<u64>() + c.iter().sum::<u64>();
                kaplan_meier(e, c, n).0
            })
            .collect();
        (Some(occ), Some(gaps))
    } else {
        (None, None)
    };
    Ok(SurvivalCurve {
        sampler: sampler.name(),
        horizon: opts.horizon,
        n0,
        values,
        ci_lo,
        ci_hi,
        std_err,
        sample_count: opts.pairs,
        censored: tally.censored,
        escaped: tally.escaped,
        strata,
        increments,
        block_counts,
        block_gaps,
    })
}

/// Restarts the schedule at each `S_i` until the horizon and records block
/// occupancy and gap lengths.
fn blocks(tower: &Tower, n0: u32, first: &CouplingTrace, opts: &SurvivalOptions, tally: &mut Tally) {
    let h = opts.horizon as u64;
    let cap = opts.block_cap;
    let mut times = vec![0u64];
    let mut known = h;
    let mut cur = first.clone();
    loop {
        match (cur.s_value, cur.end) {
            (Some(s), Some(end)) if s <= h => {
                times.push(s);
                cur = trace_from(tower, n0, end, s, opts.max_index, h);
            }
            _ => {
                if cur.s_value.is_none() && cur.reached < h {
                    known = cur.reached;
                }
                break;
            }
        }
    }
    for n in 0..=known as usize {
        let i = times.partition_point(|&s| s <= n as u64) - 1;
        tally.occupancy[i.min(cap)][n] += 1;
    }
    // gaps S_{k+1} − S_k, k = 1..cap−1, censored at the end of what is known
    for k in 1..cap {
        if k >= times.len() {
            break;
        }
        let g = k - 1;
        if k + 1 < times.len() {
            let gap = (times[k + 1] - times[k]) as usize;
            tally.gap_events[g][gap.min(opts.horizon)] += 1;
        } else {
            let c = (known - times[k]) as usize;
            tally.gap_censor[g][c.min(opts.horizon)] += 1;
        }
    }
}

/// Trace of pair `index` exactly as [`survival_curve`] draws it.
pub fn replay_pair(
    tower: &Tower,
    schedule: &StoppingSchedule,
    sampler: &dyn PairSampler,
    seed: u64,
    index: u64,
    max_index: usize,
) -> Result<CouplingTrace> {
    let mut st = Stream::new(seed, Domain::Pairs, index);
    let pair = sampler.sample(tower, &mut st)?;
    Ok(trace_from(tower, schedule.n0, pair, 0, max_index, u64::MAX))
}

/// One JSON object per line: pair index, seed and the full trace.
pub fn trace_dump(
    tower: &Tower,
    schedule: &StoppingSchedule,
    sampler: &dyn PairSampler,
    seed: u64,
    pairs: usize,
    max_index: usize,
) -> Result<String> {
    let mut out = String::new();
    for i in 0..pairs as u64 {
        let tr = replay_pair(tower, schedule, sampler, seed, i, max_index)?;
        let line = serde_json::json!({ "pair": i, "seed": seed, "trace": tr });
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

/// `P{S > n}` by dynamic programming on the product of the Ulam chain with
/// itself, for pairs drawn from `first × second`.
///
/// Exact for piecewise-affine Markov towers on a grid whose bins are the
/// cells; mass the operator leaks is dropped.
pub fn ulam_survival(
    op: &TransferOperator,
    n0: u32,
    first: &DiscretizedDensity,
    second: &DiscretizedDensity,
    horizon: usize,
) -> Result<Vec<f64>> {
    let grid = &op.grid;
    let n = grid.tower_bins;
    let r = n0 as usize + 1;
    let size = 3 * r * n * n;
    if n0 == 0 {
        return Err(Error::InvalidParameter("n0 must be positive".into()));
    }
    if size > 50_000_000 {
        return Err(Error::Unsupported(format!("product chain with {size} states")));
    }
    let level: Vec<u32> = grid.labels().map(|(_, l, _)| l as u32).collect();
    let mut succ: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for c in &grid.cells {
        for l in 0..c.return_time as usize {
            for k in 0..c.bins {
                let i = c.tower_offset + l * c.bins + k;
                if l + 1 < c.return_time as usize {
                    succ[i].push((i + c.bins, 1.0));
                } else {
                    for &(j, p) in op.row(c.base_offset + k) {
                        let (cj, kj) = base_label(grid, j as usize);
                        succ[i].push((grid.cells[cj].tower_offset + kj, p));
                    }
                }
            }
        }
    }
    let a = first.masses();
    let b = second.masses();
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    // state (class, r, i, j); class 0: k = 1, 1: k even, 2: k odd ≥ 3
    let idx = |cls: usize, rem: usize, i: usize, j: usize| ((cls * r + rem) * n + i) * n + j;
    let mut cur = vec![0.0; size];
    for i in 0..n {
        for j in 0..n {
            cur[idx(0, n0 as usize, i, j)] = a[i] * b[j] / (sa * sb);
        }
    }
    let mut out = vec![1.0];
    let mut next = vec![0.0; size];
    for _ in 1..=horizon {
        next.fill(0.0);
        for cls in 0..3 {
            for rem in 0..r {
                let rem2 = rem.saturating_sub(1);
                for i in 0..n {
                    for j in 0..n {
                        let m = cur[idx(cls, rem, i, j)];
                        if m == 0.0 {
                            continue;
                        }
                        for &(i2, p) in &succ[i] {
                            for &(j2, q) in &succ[j] {
                                let w = m * p * q;
                                if rem2 > 0 {
                                    next[idx(cls, rem2, i2, j2)] += w;
                                    continue;
                                }
                                let (lead, other) = if cls == 1 { (j2, i2) } else { (i2, j2) };
                                if level[lead] != 0 {
                                    next[idx(cls, 0, i2, j2)] += w;
                                } else if cls > 0 && level[other] == 0 {
                                    // absorbed: S = now
                                } else {
                                    let ncls = if cls == 1 { 2 } else { 1 };
                                    next[idx(ncls, n0 as usize, i2, j2)] += w;
                                }
                            }
                        }
                    }
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
        out.push(cur.iter().sum());
    }
    Ok(out)
}

fn base_label(grid: &crate::tower::TowerGrid, j: usize) -> (usize, usize) {
    let c = grid.cells.partition_point(|c| c.base_offset + c.bins <= j);
    (c, j - grid.cells[c].base_offset)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchingOptions {
    /// Rate family for both fits; automatic when absent.
    pub family: Option<String>,
    pub survival: SurvivalOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub n_grid: Vec<usize>,
    /// `|T^n_*λ₁ − T^n_*λ₂|` on the grid.
    pub lhs: Vec<f64>,
    /// `2 P{S > n}` for pairs from `λ₁ × λ₂`.
    pub rhs: Vec<f64>,
    pub rhs_ci_hi: Vec<f64>,
    pub lhs_fit: Option<RateFit>,
    pub rhs_fit: Option<RateFit>,
    pub fit_errors: Vec<String>,
    /// Smallest `c` with `lhs ≤ (2 + c) P{S > n}` on the grid.
    pub residual_constant: Option<f64>,
    /// `lhs ≤ rhs_ci_hi` at every grid point.
    pub direct_bound_holds: bool,
    pub survival: SurvivalCurve,
}

impl MatchingReport {
    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = (0..self.n_grid.len())
            .map(|i| vec![self.n_grid[i].to_string(), self.lhs[i].to_string(), self.rhs[i].to_string()])
            .collect();
        crate::io::csv(&["n", "lhs", "rhs"], &rows)
    }
}

/// Compares the measured `|T^n_*λ₁ − T^n_*λ₂|` with `2 P{S > n}`.
#[allow(clippy::too_many_arguments)]
pub fn matching_bound_check(
    tower: &Tower,
    schedule: &StoppingSchedule,
    op: &TransferOperator,
    lambda1: &DiscretizedDensity,
    lambda2: &DiscretizedDensity,
    n_grid: &[usize],
    seed: u64,
    opts: &MatchingOptions,
) -> Result<MatchingReport> {
    let mut grid = n_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let horizon = grid.last().copied().unwrap_or(0);
    let mut lhs = Vec::with_capacity(grid.len());
    let (mut d1, mut d2) = (lambda1.clone(), lambda2.clone());
    let mut at = 0;
    for &n in &grid {
        d1 = push_density(op, &d1, n - at)?;
        d2 = push_density(op, &d2, n - at)?;
        at = n;
        lhs.push(2.0 * tv_distance(&d1, &d2)?);
    }
    let sampler = DensityPairs::new("lambda1xlambda2", lambda1, lambda2)?;
    let sopts = SurvivalOptions { horizon: horizon.max(1), ..opts.survival };
    let survival = survival_curve(tower, schedule, &sampler, seed, &sopts)?;
    let rhs: Vec<f64> = grid.iter().map(|&n| 2.0 * survival.values[n]).collect();
    let rhs_ci_hi: Vec<f64> = grid.iter().map(|&n| 2.0 * survival.ci_hi[n]).collect();
    let mut fit_errors = Vec::new();
    let mut fit = |ys: &[f64], what: &str| {
        let pts: Vec<(f64, f64)> =
            grid.iter().zip(ys).filter(|(&n, &y)| n > 0 && y > 0.0).map(|(&n, &y)| (n as f64, y)).collect();
        let lo = pts.first().map_or(1.0, |p| p.0);
        let hi = pts.last().map_or(1.0, |p| p.0);
        match fit_rate(&pts, opts.family.as_deref(), FitWindow::new(lo, hi)) {
            Ok(f) => Some(f),
            Err(e) => {
                fit_errors.push(format!("{what}: {e}"));
                None
            }
        }
    };
    let lhs_fit = fit(&lhs, "lhs");
    let rhs_fit = fit(&rhs, "rhs");
    let mut residual = Some(0.0f64);
    for (l, r) in lhs.iter().zip(&rhs) {
        let p = r / 2.0;
        if *l > *r {
            residual = match residual {
                Some(c) if p > 0.0 => Some(c.max((l - r) / p)),
                _ => None,
            };
        }
    }
    let direct_bound_holds = lhs.iter().zip(&rhs_ci_hi).all(|(l, h)| *l <= h + 1e-12);
    Ok(MatchingReport {
        n_grid: grid,
        lhs,
        rhs,
        rhs_ci_hi,
        lhs_fit,
        rhs_fit,
        fit_errors,
        residual_constant: residual,
        direct_bound_holds,
        survival,
    })
}

/// Decay of `P(τ_k − τ_{k−1} > n + n₀)` against that of `m{R̂ > n}` for one stratum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementSlope {
    pub k: usize,
    /// Fitted polynomial exponent of the increment tail; `None` when the
    /// support is too short to fit.
    pub exponent: Option<f64>,
    pub hat_exponent: Option<f64>,
    /// The increment tail vanishes wherever `m{R̂ > n}` does.
    pub support_ok: bool,
    pub passed: bool,
}

/// Checks, per stratum, that increment tails decay no slower than
/// `m{R̂ > n}` up to `slack` in the polynomial exponent. Tails with finite
/// support are compared by support alone.
pub fn increment_slopes(curve: &SurvivalCurve, hat_counts: &[f64], window: FitWindow, slack: f64) -> Vec<IncrementSlope> {
    let hat_pts: Vec<(f64, f64)> =
        hat_counts.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(n, &v)| (n as f64, v)).collect();
    let hat_exponent = fit_rate(&hat_pts, Some("polynomial"), window).ok().map(|f| f.rate());
    curve
        .increments
        .iter()
        .map(|inc| {
            let support_ok = inc
                .tail
                .iter()
                .enumerate()
                .all(|(n, &p)| p == 0.0 || hat_counts.get(n).is_some_and(|&h| h > 0.0));
            let pts: Vec<(f64, f64)> =
                inc.tail.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(n, &v)| (n as f64, v)).collect();
            let exponent = fit_rate(&pts, Some("polynomial"), window).ok().map(|f| f.rate());
            let passed = support_ok
                && match (exponent, hat_exponent) {
                    (Some(e), Some(h)) => e >= h - slack,
                    _ => true,
                };
            IncrementSlope { k: inc.k, exponent, hat_exponent, support_ok, passed }
        })
        .collect()
}
