//! Named systems: a base map together with the recipe for its inducing scheme.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    AffineCellSpec, AffineMarkovMap, AlphaFn, CounterexampleMap, DoublingMap, DynamicalMap, Interval, LsvMap,
    SkewProductMap, SkewProductParams,
};
use crate::error::{Error, Result};
use crate::scheme::{build_first_return_scheme, build_strip_scheme, InducingScheme, StripOptions};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemeOptions {
    pub horizon: usize,
    pub discard_threshold: f64,
    pub strips: usize,
    pub points_per_strip: usize,
    pub seed: u64,
}

impl Default for SchemeOptions {
    fn default() -> Self {
        Self { horizon: 1000, discard_threshold: 1e-3, strips: 16, points_per_strip: 100_000, seed: 0 }
    }
}

pub trait System: Send + Sync {
    fn name(&self) -> &'static str;

    fn map(&self) -> Arc<dyn DynamicalMap>;

    fn scheme(&self, opts: &SchemeOptions) -> Result<InducingScheme>;

    /// Tail exponent `a` in `m{R > n} ≈ C n^{-a}` when theory predicts one.
    fn predicted_tail_exponent(&self) -> Option<f64> {
        None
    }
}

pub type SystemFactory = fn(&Value) -> Result<Box<dyn System>>;

fn parse<T: for<'de> Deserialize<'de>>(v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| Error::InvalidParameter(e.to_string()))
}

fn fiber_base() -> Interval {
    Interval::left_open(0.5, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DoublingScheme {
    FirstReturn,
    Binary,
}

struct Doubling {
    scheme: DoublingScheme,
}

impl System for Doubling {
    fn name(&self) -> &'static str {
        "doubling"
    }

    fn map(&self) -> Arc<dyn DynamicalMap> {
        Arc::new(DoublingMap)
    }

    fn scheme(&self, opts: &SchemeOptions) -> Result<InducingScheme> {
        match self.scheme {
            DoublingScheme::FirstReturn => {
                build_first_return_scheme(self.map(), fiber_base(), opts.horizon, opts.discard_threshold)
            }
            DoublingScheme::Binary => InducingScheme::declared(
                self.map(),
                Interval::half_open(0.0, 1.0),
                &[(Interval::half_open(0.0, 0.5), 1), (Interval::half_open(0.5, 1.0), 1)],
                true,
            ),
        }
    }
}

fn doubling_factory(v: &Value) -> Result<Box<dyn System>> {
    #[derive(Deserialize)]
    struct P {
        #[serde(default = "fr")]
        scheme: DoublingScheme,
    }
    fn fr() -> DoublingScheme {
        DoublingScheme::FirstReturn
    }
    let p: P = parse(v)?;
    Ok(Box::new(Doubling { scheme: p.scheme }))
}

struct Lsv {
    map: LsvMap,
}

impl System for Lsv {
    fn name(&self) -> &'static str {
        "lsv"
    }

    fn map(&self) -> Arc<dyn DynamicalMap> {
        Arc::new(self.map)
    }

    fn scheme(&self, opts: &SchemeOptions) -> Result<InducingScheme> {
        build_first_return_scheme(self.map(), fiber_base(), opts.horizon, opts.discard_threshold)
    }

    fn predicted_tail_exponent(&self) -> Option<f64> {
        Some(1.0 / self.map.alpha())
    }
}

fn lsv_factory(v: &Value) -> Result<Box<dyn System>> {
    #[derive(Deserialize)]
    struct P {
        alpha: f64,
    }
    let p: P = parse(v)?;
    Ok(Box::new(Lsv { map: LsvMap::new(p.alpha)? }))
}

struct Skew {
    map: SkewProductMap,
}

impl System for Skew {
    fn name(&self) -> &'static str {
        "skew"
    }

    fn map(&self) -> Arc<dyn DynamicalMap> {
        Arc::new(self.map)
    }

    fn scheme(&self, opts: &SchemeOptions) -> Result<InducingScheme> {
        build_strip_scheme(
            self.map(),
            fiber_base(),
            StripOptions {
                strips: opts.strips,
                theta_factor: 4,
                horizon: opts.horizon,
                points_per_strip: opts.points_per_strip,
                seed: opts.seed,
                discard_threshold: opts.discard_threshold,
            },
        )
    }

    fn predicted_tail_exponent(&self) -> Option<f64> {
        Some(self.map.skew_params().predicted_tail_exponent())
    }
}

fn skew_factory(v: &Value) -> Result<Box<dyn System>> {
    #[derive(Deserialize)]
    struct P {
        alpha_fn: AlphaFn,
    }
    let p: P = parse(v)?;
    Ok(Box::new(Skew { map: SkewProductMap::new(SkewProductParams::new(p.alpha_fn)?) }))
}

struct Counterexample {
    map: CounterexampleMap,
}

impl System for Counterexample {
    fn name(&self) -> &'static str {
        "counterexample"
    }

    fn map(&self) -> Arc<dyn DynamicalMap> {
        Arc::new(self.map)
    }

    fn scheme(&self, _opts: &SchemeOptions) -> Result<InducingScheme> {
        make_counterexample_scheme(self.map.measures())
    }
}

/// The three-cell scheme with return times `(1, 2, 3)`.
pub fn make_counterexample_scheme(measures: [f64; 3]) -> Result<InducingScheme> {
    let map = CounterexampleMap::new(measures)?;
    let cells: Vec<(Interval, u32)> = map.cell_bounds().iter().zip(1..).map(|(b, r)| (*b, r)).collect();
    InducingScheme::declared(Arc::new(map), Interval::half_open(0.0, map.total()), &cells, true)
}

fn counterexample_factory(v: &Value) -> Result<Box<dyn System>> {
    #[derive(Deserialize)]
    struct P {
        measures: [f64; 3],
    }
    let p: P = parse(v)?;
    Ok(Box::new(Counterexample { map: CounterexampleMap::new(p.measures)? }))
}

struct Affine {
    map: AffineMarkovMap,
}

impl System for Affine {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn map(&self) -> Arc<dyn DynamicalMap> {
        Arc::new(self.map.clone())
    }

    fn scheme(&self, _opts: &SchemeOptions) -> Result<InducingScheme> {
        make_affine_scheme(&self.map)
    }
}

/// Declared scheme of a piecewise-affine Markov system.
pub fn make_affine_scheme(map: &AffineMarkovMap) -> Result<InducingScheme> {
    let cells: Vec<(Interval, u32)> =
        map.cell_bounds().into_iter().zip(map.cells().iter().map(|c| c.return_time)).collect();
    InducingScheme::declared(Arc::new(map.clone()), Interval::half_open(0.0, map.base_len()), &cells, true)
}

fn affine_factory(v: &Value) -> Result<Box<dyn System>> {
    #[derive(Deserialize)]
    struct P {
        cells: Vec<AffineCellSpec>,
    }
    let p: P = parse(v)?;
    Ok(Box::new(Affine { map: AffineMarkovMap::new(p.cells)? }))
}

/// Systems selectable by name at run time.
pub struct SystemRegistry {
    factories: BTreeMap<&'static str, SystemFactory>,
}

impl SystemRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("doubling", doubling_factory);
        r.register("lsv", lsv_factory);
        r.register("skew", skew_factory);
        r.register("counterexample", counterexample_factory);
        r.register("affine", affine_factory);
        r
    }

    pub fn register(&mut self, name: &'static str, factory: SystemFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn build(&self, name: &str, params: &Value) -> Result<Box<dyn System>> {
        let f = self.factories.get(name).ok_or_else(|| Error::Unknown { kind: "system", name: name.into() })?;
        f(params)
    }

    /// Rebuilds a map from the `(map_id, params)` pair recorded in scheme documents.
    pub fn map_from_id(&self, id: &str, params: &Value) -> Result<Arc<dyn DynamicalMap>> {
        Ok(self.build(id, params)?.map())
    }
}
