use serde_json::json;

use super::{dyadic_refill, DynamicalMap, Interval, Region, State};

/// `x ↦ 2x mod 1` on `[0, 1)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct DoublingMap;

impl DoublingMap {
    pub fn new() -> Self {
        Self
    }
}

impl DynamicalMap for DoublingMap {
    fn id(&self) -> &'static str {
        "doubling"
    }

    fn description(&self) -> String {
        "x -> 2x mod 1 on [0,1)".into()
    }

    fn params(&self) -> serde_json::Value {
        json!({})
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn phase_space(&self) -> Region {
        Region::interval(Interval::half_open(0.0, 1.0))
    }

    fn eval(&self, s: State) -> State {
        let y = 2.0 * s.x;
        State::new(if y >= 1.0 { y - 1.0 } else { y })
    }

    fn step(&self, s: State) -> State {
        State::new(dyadic_refill(s.x, 1))
    }

    fn log_jacobian(&self, _s: State) -> Option<f64> {
        Some(std::f64::consts::LN_2)
    }

    fn branches(&self) -> Vec<Interval> {
        vec![Interval::half_open(0.0, 0.5), Interval::half_open(0.5, 1.0)]
    }

    fn eval_branch(&self, b: usize, x: f64) -> f64 {
        if b == 0 {
            2.0 * x
        } else {
            2.0 * x - 1.0
        }
    }
}
