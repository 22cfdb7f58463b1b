use serde_json::json;

use super::{DynamicalMap, Interval, Region, State};
use crate::error::{Error, Result};

/// Left branch `x(1 + 2^α x^α)`, shared by the interval map and the skew
/// product so that their fiber orbits agree bit for bit.
#[inline]
pub fn lsv_left(alpha: f64, x: f64) -> f64 {
    let t = 2.0 * x;
    let p = if alpha == 0.5 { t.sqrt() } else { t.powf(alpha) };
    x * (1.0 + p)
}

#[inline]
pub(crate) fn lsv_eval(alpha: f64, x: f64) -> f64 {
    if x <= 0.5 {
        lsv_left(alpha, x)
    } else {
        2.0 * x - 1.0
    }
}

#[inline]
pub(crate) fn lsv_log_derivative(alpha: f64, x: f64) -> f64 {
    if x <= 0.5 {
        (1.0 + (1.0 + alpha) * (2.0 * x).powf(alpha)).ln()
    } else {
        std::f64::consts::LN_2
    }
}

/// Intermittent map with a neutral fixed point at 0.
#[derive(Clone, Copy, Debug)]
pub struct LsvMap {
    alpha: f64,
}

impl LsvMap {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in (0,1), got {alpha}; the return time is not integrable for alpha >= 1"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl DynamicalMap for LsvMap {
    fn id(&self) -> &'static str {
        "lsv"
    }

    fn description(&self) -> String {
        format!("x(1+2^a x^a) on [0,1/2], 2x-1 on (1/2,1], a={}", self.alpha)
    }

    fn params(&self) -> serde_json::Value {
        json!({ "alpha": self.alpha })
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn phase_space(&self) -> Region {
        Region::interval(Interval::closed(0.0, 1.0))
    }

    fn eval(&self, s: State) -> State {
        State::new(lsv_eval(self.alpha, s.x))
    }

    fn log_jacobian(&self, s: State) -> Option<f64> {
        Some(lsv_log_derivative(self.alpha, s.x))
    }

    fn branches(&self) -> Vec<Interval> {
        vec![Interval::closed(0.0, 0.5), Interval::left_open(0.5, 1.0)]
    }

    fn eval_branch(&self, b: usize, x: f64) -> f64 {
        if b == 0 {
            lsv_left(self.alpha, x)
        } else {
            2.0 * x - 1.0
        }
    }
}
