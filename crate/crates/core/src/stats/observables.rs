//! Hölder observables and their registry.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::maps::{DynamicalMap, State};
use crate::rng::{Domain, Stream};

type EvalFn = Arc<dyn Fn(State) -> f64 + Send + Sync>;

/// A real function on phase space with a Hölder exponent and seminorm.
#[derive(Clone)]
pub struct Observable {
    pub label: String,
    pub holder_exponent: f64,
    pub holder_seminorm: f64,
    /// Largest absolute value, when known in closed form.
    pub sup_norm: Option<f64>,
    eval: EvalFn,
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Observable")
            .field("label", &self.label)
            .field("holder_exponent", &self.holder_exponent)
            .field("holder_seminorm", &self.holder_seminorm)
            .finish()
    }
}

impl Observable {
    pub fn new(
        label: impl Into<String>,
        holder_exponent: f64,
        holder_seminorm: f64,
        sup_norm: Option<f64>,
        eval: impl Fn(State) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { label: label.into(), holder_exponent, holder_seminorm, sup_norm, eval: Arc::new(eval) }
    }

    #[inline]
    pub fn eval(&self, s: State) -> f64 {
        (self.eval)(s)
    }

    pub fn eval_x(&self, x: f64) -> f64 {
        (self.eval)(State::new(x))
    }
}

/// Serialized reference to a registered observable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableSpec {
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

impl ObservableSpec {
    pub fn named(name: &str) -> Self {
        Self { name: name.into(), params: Value::Null }
    }
}

pub type ObservableFactory = fn(&Value, &Arc<dyn DynamicalMap>, &ObservableRegistry) -> Result<Observable>;

#[derive(Clone)]
pub struct ObservableRegistry {
    factories: BTreeMap<&'static str, ObservableFactory>,
}

impl ObservableRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("cos2pi", |_, _, _| {
            Ok(Observable::new("cos(2πx)", 1.0, 2.0 * PI, Some(1.0), |s| (2.0 * PI * s.x).cos()))
        });
        r.register("cospi", |_, _, _| Ok(Observable::new("cos(πx)", 1.0, PI, Some(1.0), |s| (PI * s.x).cos())));
        r.register("identity", |_, _, _| Ok(Observable::new("x", 1.0, 1.0, Some(1.0), |s| s.x)));
        r.register("one_minus_x", |_, _, _| Ok(Observable::new("1-x", 1.0, 1.0, Some(1.0), |s| 1.0 - s.x)));
        r.register("constant", |v, _, _| {
            let c = v.get("value").and_then(Value::as_f64).unwrap_or(1.0);
            Ok(Observable::new(format!("{c}"), 1.0, 0.0, Some(c.abs()), move |_| c))
        });
        r.register("coboundary", coboundary_factory);
        r
    }

    pub fn register(&mut self, name: &'static str, f: ObservableFactory) {
        self.factories.insert(name, f);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn build(&self, spec: &ObservableSpec, map: &Arc<dyn DynamicalMap>) -> Result<Observable> {
        let f = self
            .factories
            .get(spec.name.as_str())
            .ok_or_else(|| Error::Unknown { kind: "observable", name: spec.name.clone() })?;
        f(&spec.params, map, self)
    }
}

/// `g∘f − g` for a registered `g` (default `cos2pi`).
fn coboundary_factory(v: &Value, map: &Arc<dyn DynamicalMap>, reg: &ObservableRegistry) -> Result<Observable> {
    let inner = v.get("of").and_then(Value::as_str).unwrap_or("cos2pi");
    if inner == "coboundary" {
        return Err(Error::InvalidParameter("coboundary of a coboundary".into()));
    }
    let g = reg.build(&ObservableSpec::named(inner), map)?;
    let seminorm = estimate_seminorm(map.as_ref(), &|s| g.eval(map.eval(s)) - g.eval(s), 1.0, 20_000, 0x0b5e);
    let sup = g.sup_norm.map(|s| 2.0 * s);
    let label = format!("{0}∘f − {0}", g.label);
    let f = map.clone();
    Ok(Observable::new(label, 1.0, seminorm, sup, move |s| g.eval(f.eval(s)) - g.eval(s)))
}

/// Largest difference quotient over random pairs at distances spread from
/// `1e-6` to `1`, inflated by 2% to cover pairs not drawn.
pub fn estimate_seminorm(map: &dyn DynamicalMap, phi: &dyn Fn(State) -> f64, eta: f64, pairs: usize, seed: u64) -> f64 {
    let mut st = Stream::new(seed, Domain::Holder, 0);
    let ps = map.phase_space();
    let mut best = 0.0f64;
    for _ in 0..pairs {
        let (x, y) = close_pair(&mut st, ps.x.lo, ps.x.hi);
        let (a, b) = (State::new(x), State::new(y));
        let d = map.metric(a, b);
        if d > 0.0 {
            best = best.max((phi(a) - phi(b)).abs() / d.powf(eta));
        }
    }
    best * 1.02
}

fn close_pair(st: &mut Stream, lo: f64, hi: f64) -> (f64, f64) {
    let scale = 10f64.powf(-6.0 * st.uniform());
    let x = st.uniform_in(lo, hi);
    let y = (x + (2.0 * st.uniform() - 1.0) * scale * (hi - lo)).clamp(lo, hi);
    (x, y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderCheck {
    pub pairs: usize,
    /// Largest `|φ(x) − φ(y)| / (|φ|_η d(x,y)^η)` seen.
    pub worst_ratio: f64,
    pub passed: bool,
}

/// Checks `|φ(x) − φ(y)| ≤ 1.05 |φ|_η d(x,y)^η` on random pairs.
pub fn holder_check(obs: &Observable, map: &dyn DynamicalMap, pairs: usize, seed: u64) -> HolderCheck {
    let mut st = Stream::new(seed, Domain::Holder, 1);
    let ps = map.phase_space();
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let (x, y) = close_pair(&mut st, ps.x.lo, ps.x.hi);
        let (a, b) = (State::new(x), State::new(y));
        let d = map.metric(a, b);
        if d <= 0.0 {
            continue;
        }
        let diff = (obs.eval(a) - obs.eval(b)).abs();
        let bound = obs.holder_seminorm * d.powf(obs.holder_exponent);
        let r = if bound > 0.0 {
            diff / bound
        } else if diff > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        worst = worst.max(r);
    }
    HolderCheck { pairs, worst_ratio: worst, passed: worst <= 1.05 }
}
