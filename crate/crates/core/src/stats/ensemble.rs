//! Ensemble estimators: sampling the invariant measure, correlation
//! functions and the Green–Kubo variance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{DynamicalMap, State};
use crate::parallel::map_tasks;
use crate::rng::{Domain, Stream};
use crate::stats::dist::batch_interval;
use crate::stats::fit::{fit_rate, FitWindow, RateFit};
use crate::stats::observables::Observable;

/// How starts are drawn from the invariant measure: independent chains
/// from uniform initial points, each burnt in and then thinned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleOptions {
    pub burn_in: usize,
    pub stride: usize,
    pub per_chain: usize,
    pub batches: usize,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self { burn_in: 1000, stride: 16, per_chain: 64, batches: 32 }
    }
}

impl EnsembleOptions {
    fn chains(&self, count: usize) -> usize {
        count.div_ceil(self.per_chain.max(1))
    }

    fn starts_in(&self, chain: usize, count: usize) -> usize {
        let per = self.per_chain.max(1);
        per.min(count.saturating_sub(chain * per))
    }
}

fn chain_start(map: &dyn DynamicalMap, st: &mut Stream) -> State {
    let ps = map.phase_space();
    let theta = ps.theta.map_or(0.0, |t| st.uniform_in(t.lo, t.hi));
    State { theta, x: st.uniform_in(ps.x.lo, ps.x.hi) }
}

/// `count` states approximately distributed by the invariant measure.
pub fn sample_mu(map: &dyn DynamicalMap, burn_in: usize, count: usize, seed: u64) -> Vec<State> {
    sample_mu_with(map, EnsembleOptions { burn_in, ..Default::default() }, count, seed)
}

pub fn sample_mu_with(map: &dyn DynamicalMap, opts: EnsembleOptions, count: usize, seed: u64) -> Vec<State> {
    let chains = opts.chains(count);
    let parts = map_tasks(chains, |c| {
        let mut st = Stream::new(seed, Domain::Ensemble, c as u64);
        let mut x = chain_start(map, &mut st);
        for _ in 0..opts.burn_in {
            x = map.step(x);
        }
        let k = opts.starts_in(c, count);
        let mut out = Vec::with_capacity(k);
        for j in 0..k {
            if j > 0 {
                for _ in 0..opts.stride.max(1) {
                    x = map.step(x);
                }
            }
            out.push(x);
        }
        out
    });
    parts.into_iter().flatten().collect()
}

/// Running sums of one chain.
#[derive(Clone, Default)]
struct Moments {
    n: f64,
    phi: f64,
    phi2: f64,
    psi: Vec<f64>,
    psi2: Vec<f64>,
    prod: Vec<f64>,
}

impl Moments {
    fn new(lags: usize) -> Self {
        Self { psi: vec![0.0; lags], psi2: vec![0.0; lags], prod: vec![0.0; lags], ..Default::default() }
    }

    fn add(&mut self, o: &Moments) {
        self.n += o.n;
        self.phi += o.phi;
        self.phi2 += o.phi2;
        for i in 0..self.psi.len() {
            self.psi[i] += o.psi[i];
            self.psi2[i] += o.psi2[i];
            self.prod[i] += o.prod[i];
        }
    }

    fn cov(&self, i: usize) -> f64 {
        self.prod[i] / self.n - (self.phi / self.n) * (self.psi[i] / self.n)
    }

    fn var_phi(&self) -> f64 {
        (self.phi2 / self.n - (self.phi / self.n).powi(2)).max(0.0)
    }

    fn var_psi(&self, i: usize) -> f64 {
        (self.psi2[i] / self.n - (self.psi[i] / self.n).powi(2)).max(0.0)
    }
}

/// Pooled moments and per-batch moments over `budget` starts.
fn ensemble_moments(
    map: &dyn DynamicalMap,
    phi: &Observable,
    psi: &Observable,
    lags: &[usize],
    budget: usize,
    seed: u64,
    opts: EnsembleOptions,
) -> Result<(Moments, Vec<Moments>)> {
    let chains = opts.chains(budget);
    if budget == 0 || chains < opts.batches.max(2) {
        return Err(Error::BudgetTooSmall(format!(
            "{budget} starts give {chains} chains, need at least {}",
            opts.batches.max(2)
        )));
    }
    let max_lag = lags.iter().copied().max().unwrap_or(0);
    let stride = opts.stride.max(1);
    let per_chain = map_tasks(chains, |c| {
        let mut st = Stream::new(seed, Domain::Ensemble, c as u64);
        let mut x = chain_start(map, &mut st);
        for _ in 0..opts.burn_in {
            x = map.step(x);
        }
        let k = opts.starts_in(c, budget);
        // orbit segment covering every start and its largest lag
        let len = (k - 1) * stride + max_lag + 1;
        let mut phis = Vec::with_capacity(k);
        let mut psis = Vec::with_capacity(len);
        for t in 0..len {
            if t % stride == 0 && t / stride < k {
                phis.push(phi.eval(x));
            }
            psis.push(psi.eval(x));
            if t + 1 < len {
                x = map.step(x);
            }
        }
        let mut m = Moments::new(lags.len());
        for (j, &p) in phis.iter().enumerate() {
            let t0 = j * stride;
            m.n += 1.0;
            m.phi += p;
            m.phi2 += p * p;
            for (i, &lag) in lags.iter().enumerate() {
                let q = psis[t0 + lag];
                m.psi[i] += q;
                m.psi2[i] += q * q;
                m.prod[i] += p * q;
            }
        }
        m
    });
    let batches = opts.batches.max(2);
    let mut pooled = Moments::new(lags.len());
    let mut per_batch = vec![Moments::new(lags.len()); batches];
    for (c, m) in per_chain.iter().enumerate() {
        pooled.add(m);
        per_batch[c * batches / chains].add(m);
    }
    Ok((pooled, per_batch))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSeries {
    pub lags: Vec<usize>,
    /// Signed covariance `∫φ·ψ∘fⁿ dμ − ∫φ dμ ∫ψ dμ`.
    pub values: Vec<f64>,
    /// Half-width of a 95% batch-means interval.
    pub ci: Vec<f64>,
    pub estimator: String,
    pub sample_budget: usize,
    pub batches: usize,
    pub var_phi: f64,
    pub var_psi: f64,
}

impl CorrelationSeries {
    /// `(n, |value|)` points with positive lag.
    pub fn abs_points(&self) -> Vec<(f64, f64)> {
        self.lags.iter().zip(&self.values).filter(|(l, _)| **l > 0).map(|(&l, &v)| (l as f64, v.abs())).collect()
    }

    /// Polynomial fit of `|Cor|` on lags inside `window` whose estimate
    /// exceeds its interval; lags where noise dominates are left out.
    pub fn fit_polynomial(&self, window: FitWindow) -> Result<RateFit> {
        let pts: Vec<(f64, f64)> = self
            .lags
            .iter()
            .zip(self.values.iter().zip(&self.ci))
            .filter(|(l, (v, ci))| **l > 0 && v.abs() > **ci)
            .map(|(&l, (&v, _))| (l as f64, v.abs()))
            .collect();
        fit_rate(&pts, Some("polynomial"), window)
    }

    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .lags
            .iter()
            .zip(self.values.iter().zip(&self.ci))
            .map(|(l, (v, c))| vec![l.to_string(), v.to_string(), (v - c).to_string(), (v + c).to_string()])
            .collect();
        crate::io::csv(&["n", "value", "ci_lo", "ci_hi"], &rows)
    }
}

/// Ensemble estimate of `Cov_μ(φ, ψ∘fⁿ)` at each lag.
pub fn correlation_series(
    map: &dyn DynamicalMap,
    phi: &Observable,
    psi: &Observable,
    lags: &[usize],
    budget: usize,
    seed: u64,
    opts: EnsembleOptions,
) -> Result<CorrelationSeries> {
    let (pooled, batches) = ensemble_moments(map, phi, psi, lags, budget, seed, opts)?;
    let values: Vec<f64> = (0..lags.len()).map(|i| pooled.cov(i)).collect();
    let ci: Vec<f64> = (0..lags.len())
        .map(|i| batch_interval(&batches.iter().map(|b| b.cov(i)).collect::<Vec<_>>()).1)
        .collect();
    let var_phi = pooled.var_phi();
    let var_psi = if lags.is_empty() { 0.0 } else { pooled.var_psi(0) };
    if let Some(i) = (0..lags.len()).max_by_key(|&i| lags[i]) {
        let scale = (var_phi * var_psi).sqrt();
        if scale > 0.0 && ci[i] > scale {
            return Err(Error::BudgetTooSmall(format!(
                "interval {:.3e} at lag {} exceeds the covariance scale {scale:.3e}",
                ci[i], lags[i]
            )));
        }
    }
    Ok(CorrelationSeries {
        lags: lags.to_vec(),
        values,
        ci,
        estimator: "ensemble".into(),
        sample_budget: budget,
        batches: batches.len(),
        var_phi,
        var_psi,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreenKubo {
    pub sigma2: f64,
    /// Half-width of a 95% batch-means interval.
    pub ci: f64,
    pub variance: f64,
    pub lag_cap: usize,
    pub covariance_sum: f64,
    pub tail_correction: f64,
    pub tail_fit: Option<RateFit>,
    pub budget: usize,
}

impl GreenKubo {
    /// True when the interval reaches zero.
    pub fn degenerate(&self) -> bool {
        self.sigma2 <= self.ci.max(1e-12)
    }
}

/// `σ² = Var φ + 2 Σ_{n=1}^{lag_cap} Cov(φ, φ∘fⁿ)` plus a tail term from a
/// polynomial fit of the covariances when they are resolved above noise.
pub fn green_kubo_sigma2(
    map: &dyn DynamicalMap,
    phi: &Observable,
    lag_cap: usize,
    budget: usize,
    seed: u64,
    opts: EnsembleOptions,
) -> Result<GreenKubo> {
    let lags: Vec<usize> = (0..=lag_cap).collect();
    let (pooled, batches) = ensemble_moments(map, phi, phi, &lags, budget, seed, opts)?;
    let sum = |m: &Moments| m.cov(0) + 2.0 * (1..lags.len()).map(|i| m.cov(i)).sum::<f64>();
    let per_batch: Vec<f64> = batches.iter().map(sum).collect();
    let (_, ci) = batch_interval(&per_batch);
    let variance = pooled.cov(0);
    let covariance_sum = (1..lags.len()).map(|i| pooled.cov(i)).sum::<f64>();
    let mut tail_correction = 0.0;
    let mut tail_fit = None;
    let lo = 10usize;
    if lag_cap as f64 >= lo as f64 * 10f64.sqrt() {
        let cis: Vec<f64> =
            (0..lags.len()).map(|i| batch_interval(&batches.iter().map(|b| b.cov(i)).collect::<Vec<_>>()).1).collect();
        let window: Vec<usize> = (lo..=lag_cap).collect();
        let resolved = window.iter().filter(|&&n| pooled.cov(n).abs() > cis[n]).count();
        if resolved * 4 >= window.len() * 3 {
            let pts: Vec<(f64, f64)> = window.iter().map(|&n| (n as f64, pooled.cov(n).abs())).collect();
            let fit = fit_rate(&pts, Some("polynomial"), FitWindow::new(lo as f64, lag_cap as f64))?;
            let p = fit.rate();
            if p <= 1.0 {
                return Err(Error::NonSummable(p));
            }
            let pref = fit.param("prefactor").map_or(0.0, |q| q.value);
            let sign = window.iter().map(|&n| pooled.cov(n)).sum::<f64>().signum();
            tail_correction = 2.0 * sign * pref * (lag_cap as f64 + 0.5).powf(1.0 - p) / (p - 1.0);
            tail_fit = Some(fit);
        }
    }
    let sigma2 = (sum(&pooled) + tail_correction).max(0.0);
    Ok(GreenKubo { sigma2, ci, variance, lag_cap, covariance_sum, tail_correction, tail_fit, budget })
}
