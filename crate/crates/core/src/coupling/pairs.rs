//! Pair measures on `Δ × Δ` and their registry.

use std::collections::BTreeMap;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::stats::observables::{ObservableRegistry, ObservableSpec};
use crate::tower::{
    lift_observable, star_normalize, DensitySampler, DiscretizedDensity, InvariantDensity, Tower, TowerPoint,
};

/// Draws independent pairs of tower points.
pub trait PairSampler: Send + Sync {
    fn name(&self) -> String;

    fn sample(&self, tower: &Tower, stream: &mut Stream) -> Result<[TowerPoint; 2]>;
}

/// `m × m` with `m` the normalised reference measure on the tower.
pub struct ReferencePairs;

impl PairSampler for ReferencePairs {
    fn name(&self) -> String {
        "reference".into()
    }

    fn sample(&self, tower: &Tower, stream: &mut Stream) -> Result<[TowerPoint; 2]> {
        Ok([tower.sample_reference(stream)?, tower.sample_reference(stream)?])
    }
}

/// `λ₁ × λ₂` for two discretized densities.
pub struct DensityPairs {
    label: String,
    first: DensitySampler,
    second: DensitySampler,
}

impl DensityPairs {
    pub fn new(label: impl Into<String>, first: &DiscretizedDensity, second: &DiscretizedDensity) -> Result<Self> {
        Ok(Self { label: label.into(), first: DensitySampler::new(first)?, second: DensitySampler::new(second)? })
    }
}

impl PairSampler for DensityPairs {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn sample(&self, tower: &Tower, stream: &mut Stream) -> Result<[TowerPoint; 2]> {
        Ok([tower.sample_density(&self.first, stream)?, tower.sample_density(&self.second, stream)?])
    }
}

/// What a pair-sampler factory may draw on.
pub struct PairContext<'a> {
    pub tower: &'a Tower,
    pub invariant: Option<&'a InvariantDensity>,
    pub observables: &'a ObservableRegistry,
}

impl PairContext<'_> {
    fn invariant(&self) -> Result<&InvariantDensity> {
        self.invariant.ok_or_else(|| Error::InvalidParameter("pair measure needs the invariant density".into()))
    }
}

pub type PairFactory = fn(&Value, &PairContext<'_>) -> Result<Box<dyn PairSampler>>;

pub struct PairSamplerRegistry {
    factories: BTreeMap<&'static str, PairFactory>,
}

impl PairSamplerRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("reference", |_, _| Ok(Box::new(ReferencePairs)));
        r.register("invariant", |_, ctx| {
            let nu = &ctx.invariant()?.tower;
            Ok(Box::new(DensityPairs::new("invariant", nu, nu)?))
        });
        r.register("observables", observable_pairs);
        r
    }

    pub fn register(&mut self, name: &'static str, f: PairFactory) {
        self.factories.insert(name, f);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn build(&self, name: &str, params: &Value, ctx: &PairContext<'_>) -> Result<Box<dyn PairSampler>> {
        let f = self.factories.get(name).ok_or_else(|| Error::Unknown { kind: "pair sampler", name: name.into() })?;
        f(params, ctx)
    }
}

/// `λ = φ*·ν` for an observable given by name (and optional params).
pub fn observable_density(
    spec: &ObservableSpec,
    ctx: &PairContext<'_>,
    quadrature: usize,
) -> Result<DiscretizedDensity> {
    let inv = ctx.invariant()?;
    let map = ctx.tower.scheme().map().clone();
    let obs = ctx.observables.build(spec, &map)?;
    let lifted = lift_observable(ctx.tower, &inv.tower.grid, quadrature, &|x| obs.eval_x(x));
    Ok(star_normalize(&lifted, &inv.tower)?.lambda)
}

fn spec_of(v: Option<&Value>, default: &str) -> Result<ObservableSpec> {
    match v {
        None => Ok(ObservableSpec::named(default)),
        Some(Value::String(s)) => Ok(ObservableSpec::named(s)),
        Some(other) => Ok(serde_json::from_value(other.clone())?),
    }
}

fn observable_pairs(v: &Value, ctx: &PairContext<'_>) -> Result<Box<dyn PairSampler>> {
    let q = v.get("quadrature").and_then(Value::as_u64).unwrap_or(8) as usize;
    let a = spec_of(v.get("phi1"), "identity")?;
    let b = spec_of(v.get("phi2"), "one_minus_x")?;
    let l1 = observable_density(&a, ctx, q)?;
    let l2 = observable_density(&b, ctx, q)?;
    Ok(Box::new(DensityPairs::new(format!("{}x{}", a.name, b.name), &l1, &l2)?))
}
