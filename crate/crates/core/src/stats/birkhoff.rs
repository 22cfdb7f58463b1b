//! Birkhoff-sum statistics from independent starts: central limit checks
//! and large deviations.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::maps::DynamicalMap;
use crate::parallel::map_tasks;
use crate::rng::{Domain, Stream};
use crate::stats::dist::{ks_normal, ks_null_quantile, wilson, Z95};
use crate::stats::ensemble::{EnsembleOptions, GreenKubo};
use crate::stats::fit::{fit_rate, FitWindow, RateFit};
use crate::stats::observables::Observable;

const CHUNK: usize = 256;

/// Partial sums `S_n φ` at each `n` in `grid` for `samples` independent
/// starts, plus the sum of every evaluated `φ` value.
fn birkhoff_sums(
    map: &dyn DynamicalMap,
    phi: &Observable,
    grid: &[usize],
    samples: usize,
    burn_in: usize,
    seed: u64,
) -> (Vec<Vec<f64>>, f64) {
    let n_max = grid.iter().copied().max().unwrap_or(0);
    let chunks = samples.div_ceil(CHUNK);
    let parts = map_tasks(chunks, |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(samples);
        let mut rows = Vec::with_capacity(hi - lo);
        let mut total = 0.0;
        for i in lo..hi {
            let mut st = Stream::new(seed, Domain::Ensemble, i as u64);
            let ps = map.phase_space();
            let theta = ps.theta.map_or(0.0, |t| st.uniform_in(t.lo, t.hi));
            let mut x = crate::maps::State { theta, x: st.uniform_in(ps.x.lo, ps.x.hi) };
            for _ in 0..burn_in {
                x = map.step(x);
            }
            let mut row = Vec::with_capacity(grid.len());
            let mut s = 0.0;
            let mut g = 0;
            for n in 1..=n_max {
                s += phi.eval(x);
                x = map.step(x);
                while g < grid.len() && grid[g] == n {
                    row.push(s);
                    g += 1;
                }
            }
            total += s;
            rows.push(row);
        }
        (rows, total)
    });
    let mut rows = Vec::with_capacity(samples);
    let mut total = 0.0;
    for (r, t) in parts {
        rows.extend(r);
        total += t;
    }
    (rows, total / (samples.max(1) * n_max.max(1)) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CltVerdict {
    ConsistentWithClt,
    Degenerate,
    Inconsistent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub n_grid: Vec<usize>,
    pub samples: usize,
    pub sigma2: f64,
    pub sigma2_ci: f64,
    pub mean: f64,
    pub ks_distance: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// 95% quantile of the KS distance over Gaussian control runs of the same size.
    pub null_quantile: f64,
    pub verdict: CltVerdict,
}

/// Distribution of `(S_n φ − n μ(φ))/√n` against `N(0, σ²)` along `n_grid`.
///
/// The pass threshold at each `n` is the control quantile plus the KS shift
/// that the uncertainty in `σ²` can cause, plus `1/√n` for finite-`n` bias.
pub fn clt_check(
    map: &dyn DynamicalMap,
    phi: &Observable,
    n_grid: &[usize],
    samples: usize,
    seed: u64,
    sigma: &GreenKubo,
    opts: EnsembleOptions,
) -> Result<CltReport> {
    let mut grid = n_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let (rows, mean) = birkhoff_sums(map, phi, &grid, samples, opts.burn_in, seed);
    let null_quantile = ks_null_quantile(samples, 40, 0.95, seed ^ 0xC0_17A0);
    let sd = sigma.sigma2.max(0.0).sqrt();
    // sup |Φ(x/σ̂) − Φ(x/σ)| ≈ φ(1) |σ̂/σ − 1| with φ(1) ≈ 0.242
    let sigma_shift = if sigma.sigma2 > 0.0 { 0.242 * sigma.ci / (2.0 * sigma.sigma2) } else { 0.0 };
    let mut ks = Vec::with_capacity(grid.len());
    let mut thresholds = Vec::with_capacity(grid.len());
    for (g, &n) in grid.iter().enumerate() {
        let z: Vec<f64> = rows.iter().map(|r| (r[g] - n as f64 * mean) / (n as f64).sqrt()).collect();
        ks.push(ks_normal(&z, sd));
        thresholds.push(null_quantile + sigma_shift + 1.0 / (n as f64).sqrt());
    }
    let verdict = if sigma.degenerate() {
        CltVerdict::Degenerate
    } else {
        let decreasing = ks.windows(2).all(|w| w[1] <= w[0] + null_quantile);
        let last_ok = ks.last().zip(thresholds.last()).is_some_and(|(k, t)| k <= t);
        if decreasing && last_ok {
            CltVerdict::ConsistentWithClt
        } else {
            CltVerdict::Inconsistent
        }
    };
    Ok(CltReport {
        n_grid: grid,
        samples,
        sigma2: sigma.sigma2,
        sigma2_ci: sigma.ci,
        mean,
        ks_distance: ks,
        thresholds,
        null_quantile,
        verdict,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LdOptions {
    /// Fit family; automatic selection by r² when absent.
    pub family: Option<String>,
    /// Known `μ(φ)`; estimated from all sampled values when absent.
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdReport {
    pub epsilon: f64,
    pub n_grid: Vec<usize>,
    pub samples: usize,
    pub mean: f64,
    pub ld_values: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
    pub fit: Option<RateFit>,
    pub fit_error: Option<String>,
}

impl LdReport {
    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = (0..self.n_grid.len())
            .map(|i| {
                vec![
                    self.n_grid[i].to_string(),
                    self.ld_values[i].to_string(),
                    self.ci_lo[i].to_string(),
                    self.ci_hi[i].to_string(),
                ]
            })
            .collect();
        crate::io::csv(&["n", "value", "ci_lo", "ci_hi"], &rows)
    }
}

/// Fraction of starts with `|S_n φ / n − μ(φ)| > ε` at each `n`.
#[allow(clippy::too_many_arguments)]
pub fn ld_curve(
    map: &dyn DynamicalMap,
    phi: &Observable,
    epsilon: f64,
    n_grid: &[usize],
    samples: usize,
    seed: u64,
    ens: EnsembleOptions,
    opts: &LdOptions,
) -> Result<LdReport> {
    if !(epsilon > 0.0) {
        return Err(crate::Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut grid = n_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let (rows, grand) = birkhoff_sums(map, phi, &grid, samples, ens.burn_in, seed);
    let mean = opts.mean.unwrap_or(grand);
    let (mut vals, mut lo, mut hi) = (Vec::new(), Vec::new(), Vec::new());
    for (g, &n) in grid.iter().enumerate() {
        let k = rows.iter().filter(|r| (r[g] / n as f64 - mean).abs() > epsilon).count() as f64;
        vals.push(k / samples as f64);
        let [a, b] = wilson(k, samples as f64, Z95);
        lo.push(a);
        hi.push(b);
    }
    let pts: Vec<(f64, f64)> = grid.iter().zip(&vals).map(|(&n, &v)| (n as f64, v)).collect();
    let window = FitWindow::new(grid.first().copied().unwrap_or(1) as f64, grid.last().copied().unwrap_or(1) as f64);
    let (fit, fit_error) = match fit_rate(&pts, opts.family.as_deref(), window) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(LdReport { epsilon, n_grid: grid, samples, mean, ld_values: vals, ci_lo: lo, ci_hi: hi, fit, fit_error })
}
