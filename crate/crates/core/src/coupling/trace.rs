//! The alternating stopping times `τ_k` and the simultaneous return `S`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tower::{Tower, TowerPoint};

use super::StoppingSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub theta: f64,
    pub x: f64,
    pub level: u32,
    pub cell: usize,
}

impl From<&TowerPoint> for PointRecord {
    fn from(p: &TowerPoint) -> Self {
        Self { theta: p.x.theta, x: p.x.x, level: p.level, cell: p.cell }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceStop {
    Coupled,
    MaxIndex,
    TimeLimit,
    /// An iterate fell into mass discarded by a truncated scheme.
    Escaped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingTrace {
    pub start: [PointRecord; 2],
    /// `τ_0 < τ_1 < …`, absolute times; `τ_0` is the start time.
    pub taus: Vec<u64>,
    /// `None` stands for `S = ∞` within the limits of the run.
    pub s_value: Option<u64>,
    pub s_index: Option<usize>,
    pub stop: TraceStop,
    /// Latest time up to which the pair was followed; `S` exceeds it when
    /// no simultaneous return was found.
    pub reached: u64,
    #[serde(skip)]
    pub(crate) end: Option<[TowerPoint; 2]>,
}

impl CouplingTrace {
    /// `τ_k − τ_{k−1} − n₀` for `k ≥ 1`: the observed `R̂` values.
    pub fn hat_increments(&self, n0: u32) -> Vec<u64> {
        self.taus.windows(2).map(|w| w[1] - w[0] - n0 as u64).collect()
    }
}

/// `R̂` of a tower point: `0` on the base, `R − ℓ` above it.
pub fn hat_return_time(tower: &Tower, p: &TowerPoint) -> u32 {
    tower.hat_return_time(p)
}

/// Follows the pair from `start` through `τ_1, τ_2, …` until both
/// coordinates sit in `Δ₀` at some `τ_i` with `i ≥ 2`.
pub(crate) fn trace_from(
    tower: &Tower,
    n0: u32,
    pair: [TowerPoint; 2],
    start: u64,
    max_index: usize,
    time_limit: u64,
) -> CouplingTrace {
    let mut pts = pair;
    let mut t = start;
    let mut taus = vec![start];
    let out = |taus: Vec<u64>, stop, reached, s: Option<(u64, usize)>, end: Option<[TowerPoint; 2]>| CouplingTrace {
        start: [PointRecord::from(&pair[0]), PointRecord::from(&pair[1])],
        taus,
        s_value: s.map(|v| v.0),
        s_index: s.map(|v| v.1),
        stop,
        reached,
        end,
    };
    for k in 1..=max_index {
        let d = if k % 2 == 1 { 0 } else { 1 };
        let lead = n0 as u64;
        if t + lead > time_limit {
            return out(taus, TraceStop::TimeLimit, time_limit, None, Some(pts));
        }
        match advance(tower, &mut pts, lead) {
            Ok(()) => t += lead,
            Err(_) => return out(taus, TraceStop::Escaped, t, None, None),
        }
        let hat = tower.hat_return_time(&pts[d]) as u64;
        if t + hat > time_limit {
            return out(taus, TraceStop::TimeLimit, time_limit, None, Some(pts));
        }
        match advance(tower, &mut pts, hat) {
            Ok(()) => t += hat,
            Err(_) => return out(taus, TraceStop::Escaped, t, None, None),
        }
        taus.push(t);
        if k >= 2 && pts[1 - d].in_base() {
            return out(taus, TraceStop::Coupled, t, Some((t, k)), Some(pts));
        }
    }
    out(taus, TraceStop::MaxIndex, t, None, Some(pts))
}

fn advance(tower: &Tower, pts: &mut [TowerPoint; 2], n: u64) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    let n = usize::try_from(n).map_err(|_| Error::InvalidParameter("step count overflows".into()))?;
    pts[0] = tower.iterate(&pts[0], n)?;
    pts[1] = tower.iterate(&pts[1], n)?;
    Ok(())
}

/// Deterministic trace of one pair; a trace without a simultaneous return
/// by `τ_{max_index}` reports `s_value = None`.
pub fn run_coupling_trace(
    tower: &Tower,
    schedule: &StoppingSchedule,
    p1: &TowerPoint,
    p2: &TowerPoint,
    max_index: usize,
) -> CouplingTrace {
    trace_from(tower, schedule.n0, [*p1, *p2], 0, max_index, u64::MAX)
}
