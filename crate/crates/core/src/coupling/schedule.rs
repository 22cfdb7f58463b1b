//! Constructive `n₀`, `γ₀` for the stopping-time schedule.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::map_tasks;
use crate::structure::{MixingVerdict, Verdict};
use crate::tower::{push_density, DiscretizedDensity, Tower, TransferOperator};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleOptions {
    pub window: usize,
    pub horizon: usize,
    /// Scan an inconclusive verdict as if mixing were certified.
    pub allow_inconclusive: bool,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self { window: 20, horizon: 200, allow_inconclusive: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingSchedule {
    pub n0: u32,
    pub gamma0: f64,
    pub certification_window: usize,
    pub horizon: usize,
    /// Smallest image-set mean of `m(T^{-n}Δ₀ ∩ A)` over `(horizon, horizon + window]`.
    pub asymptote: f64,
    pub grid_resolution: usize,
    /// Distinct image sets `f^R(ω)` scanned.
    pub image_sets: usize,
    /// `min_A m(T^{-n}Δ₀ ∩ A)` for `n = 0..=horizon + window`.
    pub profile: Vec<f64>,
}

impl StoppingSchedule {
    /// Schedule with given constants and no scan record, for towers whose
    /// constants are known in closed form.
    pub fn fixed(n0: u32, gamma0: f64) -> Result<Self> {
        if n0 == 0 || !(gamma0 > 0.0) {
            return Err(Error::InvalidParameter(format!("need n0 >= 1 and gamma0 > 0, got {n0}, {gamma0}")));
        }
        Ok(Self {
            n0,
            gamma0,
            certification_window: 0,
            horizon: 0,
            asymptote: gamma0,
            grid_resolution: 0,
            image_sets: 0,
            profile: Vec::new(),
        })
    }
}

/// `m(T^{-n}Δ₀ ∩ A)` for `n = 0..=steps`: the level-0 mass of `T^n_*(m|A)`.
pub fn base_return_profile(op: &TransferOperator, cells: &[usize], steps: usize) -> Result<Vec<f64>> {
    let mut d = DiscretizedDensity::lebesgue_on_base(op.grid.clone(), cells.iter().copied());
    let mut out = Vec::with_capacity(steps + 1);
    out.push(d.base_mass());
    for _ in 0..steps {
        d = push_density(op, &d, 1)?;
        out.push(d.base_mass());
    }
    Ok(out)
}

/// Scans `n₀ = 1, 2, …` for the first offset at which every image set keeps
/// at least half the asymptotic return mass throughout `[n₀, n₀ + window]`.
pub fn certify_schedule(
    tower: &Tower,
    op: &TransferOperator,
    verdict: &MixingVerdict,
    opts: ScheduleOptions,
) -> Result<StoppingSchedule> {
    match verdict.verdict {
        Verdict::MixingCertified => {}
        Verdict::Inconclusive if opts.allow_inconclusive => {}
        v => {
            return Err(Error::NoScheduleFound(format!(
                "mixing verdict is {}; a schedule needs a certified mixing tower",
                serde_json::to_value(v).ok().and_then(|s| s.as_str().map(String::from)).unwrap_or_default()
            )))
        }
    }
    if opts.window == 0 || opts.horizon == 0 {
        return Err(Error::InvalidParameter("window and horizon must be positive".into()));
    }
    let scheme = tower.scheme();
    let sets: BTreeSet<Vec<usize>> = scheme.cells().iter().map(|c| c.image.iter().collect()).collect();
    let sets: Vec<Vec<usize>> = sets.into_iter().collect();
    let steps = opts.horizon + opts.window;
    let profiles: Vec<Vec<f64>> =
        map_tasks(sets.len(), |i| base_return_profile(op, &sets[i], steps)).into_iter().collect::<Result<_>>()?;
    let profile: Vec<f64> =
        (0..=steps).map(|n| profiles.iter().map(|p| p[n]).fold(f64::INFINITY, f64::min)).collect();
    let asymptote = profiles
        .iter()
        .map(|p| p[opts.horizon + 1..=steps].iter().sum::<f64>() / opts.window as f64)
        .fold(f64::INFINITY, f64::min);
    for n0 in 1..=opts.horizon {
        let floor = profile[n0..=n0 + opts.window].iter().copied().fold(f64::INFINITY, f64::min);
        if floor > 0.0 && floor >= 0.5 * asymptote {
            return Ok(StoppingSchedule {
                n0: n0 as u32,
                gamma0: floor,
                certification_window: opts.window,
                horizon: opts.horizon,
                asymptote,
                grid_resolution: op.grid.resolution,
                image_sets: sets.len(),
                profile,
            });
        }
    }
    Err(Error::NoScheduleFound(format!(
        "no offset up to {} keeps half the asymptotic return mass {asymptote:.3e} over a window of {}",
        opts.horizon, opts.window
    )))
}
