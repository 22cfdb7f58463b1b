use serde_json::json;

use super::{affine_refill, DynamicalMap, Interval, Region, State};
use crate::error::{Error, Result};

/// Piecewise-affine three-cell map on `[0, m1+m2+m3)`.
///
/// Cells are `ω1 = [0, m1)`, `ω2 = [m1, m1+m2)`, `ω3 = [m1+m2, L)`; `ω1` is
/// stretched onto `ω2 ∪ ω3` and the other two cells onto `ω1`. Every branch
/// is increasing.
#[derive(Clone, Copy, Debug)]
pub struct CounterexampleMap {
    m: [f64; 3],
}

impl CounterexampleMap {
    pub fn new(measures: [f64; 3]) -> Result<Self> {
        if measures.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "cell measures must be positive, got {measures:?}"
            )));
        }
        Ok(Self { m: measures })
    }

    pub fn measures(&self) -> [f64; 3] {
        self.m
    }

    pub fn total(&self) -> f64 {
        self.m[0] + self.m[1] + self.m[2]
    }

    pub fn cell_bounds(&self) -> [Interval; 3] {
        let [a, b, c] = self.m;
        [
            Interval::half_open(0.0, a),
            Interval::half_open(a, a + b),
            Interval::half_open(a + b, a + b + c),
        ]
    }

    fn slope(&self, b: usize) -> f64 {
        let [a, m2, m3] = self.m;
        match b {
            0 => (m2 + m3) / a,
            1 => a / m2,
            _ => a / m3,
        }
    }
}

impl DynamicalMap for CounterexampleMap {
    fn id(&self) -> &'static str {
        "counterexample"
    }

    fn description(&self) -> String {
        format!("three-cell affine map with cell measures {:?}", self.m)
    }

    fn params(&self) -> serde_json::Value {
        json!({ "measures": self.m })
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn phase_space(&self) -> Region {
        Region::interval(Interval::half_open(0.0, self.total()))
    }

    fn eval(&self, s: State) -> State {
        let b = if s.x < self.m[0] {
            0
        } else if s.x < self.m[0] + self.m[1] {
            1
        } else {
            2
        };
        State::new(self.eval_branch(b, s.x))
    }

    fn step(&self, s: State) -> State {
        let [a, m2, m3] = self.m;
        let y = if s.x < a {
            affine_refill(a, s.x, self.slope(0), a)
        } else if s.x < a + m2 {
            affine_refill(0.0, s.x - a, self.slope(1), m2)
        } else {
            affine_refill(0.0, s.x - a - m2, self.slope(2), m3)
        };
        State::new(y)
    }

    fn log_jacobian(&self, s: State) -> Option<f64> {
        let b = if s.x < self.m[0] {
            0
        } else if s.x < self.m[0] + self.m[1] {
            1
        } else {
            2
        };
        Some(self.slope(b).ln())
    }

    fn branches(&self) -> Vec<Interval> {
        self.cell_bounds().to_vec()
    }

    fn eval_branch(&self, b: usize, x: f64) -> f64 {
        let [a, m2, _] = self.m;
        match b {
            0 => a + x * self.slope(0),
            1 => (x - a) * self.slope(1),
            _ => (x - a - m2) * self.slope(2),
        }
    }
}
