use serde::{Deserialize, Serialize};
use serde_json::json;

use super::lsv::{lsv_eval, lsv_log_derivative};
use super::{dyadic_refill, DynamicalMap, Interval, Region, State};
use crate::error::{Error, Result};

/// The fiber exponent as a function on the circle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaFn {
    Constant { value: f64 },
    /// `min + (max - min)(1 + cos 2πθ)/2`; the maximum sits at θ = 0.
    Cosine { min: f64, max: f64 },
}

impl AlphaFn {
    #[inline]
    pub fn eval(&self, theta: f64) -> f64 {
        match *self {
            AlphaFn::Constant { value } => value,
            AlphaFn::Cosine { min, max } => {
                min + (max - min) * 0.5 * (1.0 + (std::f64::consts::TAU * theta).cos())
            }
        }
    }
}

const ALPHA_GRID: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewProductParams {
    pub alpha_fn: AlphaFn,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl SkewProductParams {
    /// Derives the extrema from a dense grid and validates the range.
    pub fn new(alpha_fn: AlphaFn) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..ALPHA_GRID {
            let a = alpha_fn.eval(i as f64 / ALPHA_GRID as f64);
            lo = lo.min(a);
            hi = hi.max(a);
        }
        if !(lo > 0.0 && hi < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must map the circle into (0,1); grid range is [{lo}, {hi}]"
            )));
        }
        Ok(Self { alpha_fn, alpha_min: lo, alpha_max: hi })
    }

    /// The tail exponent associated with the slowest fiber.
    pub fn predicted_tail_exponent(&self) -> f64 {
        1.0 / self.alpha_max
    }
}

/// `(θ, x) ↦ (4θ mod 1, f_{α(θ)}(x))` on the circle times `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct SkewProductMap {
    params: SkewProductParams,
}

impl SkewProductMap {
    pub fn new(params: SkewProductParams) -> Self {
        Self { params }
    }

    pub fn skew_params(&self) -> &SkewProductParams {
        &self.params
    }

    #[inline]
    pub fn alpha(&self, theta: f64) -> f64 {
        self.params.alpha_fn.eval(theta)
    }
}

impl DynamicalMap for SkewProductMap {
    fn id(&self) -> &'static str {
        "skew"
    }

    fn description(&self) -> String {
        format!(
            "(4t mod 1, x(1+2^a(t) x^a(t)) | 2x-1), a in [{}, {}]",
            self.params.alpha_min, self.params.alpha_max
        )
    }

    fn params(&self) -> serde_json::Value {
        json!({
            "alpha_fn": self.params.alpha_fn,
            "alpha_min": self.params.alpha_min,
            "alpha_max": self.params.alpha_max,
        })
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn phase_space(&self) -> Region {
        Region { theta: Some(Interval::half_open(0.0, 1.0)), x: Interval::closed(0.0, 1.0) }
    }

    fn eval(&self, s: State) -> State {
        let a = self.alpha(s.theta);
        State::skew((4.0 * s.theta).fract(), lsv_eval(a, s.x))
    }

    fn step(&self, s: State) -> State {
        let a = self.alpha(s.theta);
        State::skew(dyadic_refill(s.theta, 2), lsv_eval(a, s.x))
    }

    fn metric(&self, a: State, b: State) -> f64 {
        let d = (a.theta - b.theta).abs();
        d.min(1.0 - d).max((a.x - b.x).abs())
    }

    fn log_jacobian(&self, s: State) -> Option<f64> {
        Some(4f64.ln() + lsv_log_derivative(self.alpha(s.theta), s.x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::LsvMap;

    #[test]
    fn linear_branch_example() {
        let p = SkewProductParams::new(AlphaFn::Constant { value: 0.5 }).unwrap();
        let f = SkewProductMap::new(p);
        let y = f.eval(State::skew(0.1, 0.75));
        assert_eq!(y.theta, 0.4);
        assert_eq!(y.x, 0.5);
    }

    #[test]
    fn constant_alpha_matches_interval_map() {
        let p = SkewProductParams::new(AlphaFn::Constant { value: 0.5 }).unwrap();
        let f = SkewProductMap::new(p);
        let g = LsvMap::new(0.5).unwrap();
        let mut s = State::skew(0.37, 0.123);
        let mut x = State::new(0.123);
        for _ in 0..1000 {
            s = f.step(s);
            x = g.step(x);
            assert_eq!(s.x, x.x);
        }
    }

    #[test]
    fn extrema_from_grid() {
        let p = SkewProductParams::new(AlphaFn::Cosine { min: 0.55, max: 0.6 }).unwrap();
        assert!((p.alpha_max - 0.6).abs() < 1e-12);
        assert!((p.alpha_min - 0.55).abs() < 1e-6);
        assert!((p.predicted_tail_exponent() - 5.0 / 3.0).abs() < 1e-9);
        assert!(SkewProductParams::new(AlphaFn::Cosine { min: 0.5, max: 1.2 }).is_err());
    }
}
