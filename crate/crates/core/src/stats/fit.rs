//! Least-squares fits of decay laws on linearised coordinates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `C n^{-p}`
    Polynomial,
    /// `C e^{-c n}`
    Exponential,
    /// `e^{-c n^a}`
    Stretched,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: f64,
    pub ci: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub family: Family,
    pub params: Vec<Param>,
    pub window: [f64; 2],
    pub r2: f64,
    pub points: usize,
}

impl RateFit {
    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// The decay exponent: `p` for polynomial, `c` for exponential, `a` for stretched.
    pub fn rate(&self) -> f64 {
        self.params[0].value
    }

    pub fn rate_ci(&self) -> [f64; 2] {
        self.params[0].ci
    }

    pub fn predict(&self, n: f64) -> f64 {
        let v = |k: &str| self.param(k).map_or(f64::NAN, |p| p.value);
        match self.family {
            Family::Polynomial => v("prefactor") * n.powf(-v("p")),
            Family::Exponential => v("prefactor") * (-v("c") * n).exp(),
            Family::Stretched => (-v("c") * n.powf(v("a"))).exp(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitWindow {
    pub lo: f64,
    pub hi: f64,
}

impl FitWindow {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, n: f64) -> bool {
        n >= self.lo && n <= self.hi
    }
}

/// Result of a straight-line fit `v = intercept + slope u`.
#[derive(Clone, Copy, Debug)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
    pub r2: f64,
    pub n: usize,
}

pub fn fit_line(points: &[(f64, f64)]) -> Result<LineFit> {
    let n = points.len();
    if n < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: n });
    }
    let nf = n as f64;
    let mu = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let mv = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut suu, mut suv, mut svv) = (0.0, 0.0, 0.0);
    for &(u, v) in points {
        suu += (u - mu) * (u - mu);
        suv += (u - mu) * (v - mv);
        svv += (v - mv) * (v - mv);
    }
    if !(suu > 0.0) {
        return Err(Error::IllConditioned("abscissae are all equal".into()));
    }
    let slope = suv / suu;
    let intercept = mv - slope * mu;
    let sse: f64 = points.iter().map(|&(u, v)| (v - intercept - slope * u).powi(2)).sum();
    let s2 = sse / (nf - 2.0);
    let slope_se = (s2 / suu).sqrt();
    let intercept_se = (s2 * (1.0 / nf + mu * mu / suu)).sqrt();
    let r2 = if svv > 0.0 { 1.0 - sse / svv } else { 1.0 };
    Ok(LineFit { slope, intercept, slope_se, intercept_se, r2, n })
}

/// A decay-law family fitted on linearised coordinates.
pub trait RateFamily: Send + Sync {
    fn name(&self) -> &'static str;

    fn family(&self) -> Family;

    /// Maps a curve point to the linear scale, or `None` if unusable there.
    fn linearize(&self, n: f64, y: f64) -> Option<(f64, f64)>;

    /// Converts the line back to named parameters, rate first.
    fn params(&self, line: &LineFit, t: f64) -> Vec<Param>;

    fn admissible(&self, params: &[Param]) -> bool;
}

struct Polynomial;
struct Exponential;
struct Stretched;

fn interval(v: f64, half: f64) -> [f64; 2] {
    [v - half, v + half]
}

impl RateFamily for Polynomial {
    fn name(&self) -> &'static str {
        "polynomial"
    }

    fn family(&self) -> Family {
        Family::Polynomial
    }

    fn linearize(&self, n: f64, y: f64) -> Option<(f64, f64)> {
        (n > 0.0 && y > 0.0).then(|| (n.ln(), y.ln()))
    }

    fn params(&self, l: &LineFit, t: f64) -> Vec<Param> {
        let c = l.intercept.exp();
        vec![
            Param { name: "p".into(), value: -l.slope, ci: interval(-l.slope, t * l.slope_se) },
            Param {
                name: "prefactor".into(),
                value: c,
                ci: [(l.intercept - t * l.intercept_se).exp(), (l.intercept + t * l.intercept_se).exp()],
            },
        ]
    }

    fn admissible(&self, p: &[Param]) -> bool {
        p[0].value > 0.0
    }
}

impl RateFamily for Exponential {
    fn name(&self) -> &'static str {
        "exponential"
    }

    fn family(&self) -> Family {
        Family::Exponential
    }

    fn linearize(&self, n: f64, y: f64) -> Option<(f64, f64)> {
        (y > 0.0).then(|| (n, y.ln()))
    }

    fn params(&self, l: &LineFit, t: f64) -> Vec<Param> {
        vec![
            Param { name: "c".into(), value: -l.slope, ci: interval(-l.slope, t * l.slope_se) },
            Param {
                name: "prefactor".into(),
                value: l.intercept.exp(),
                ci: [(l.intercept - t * l.intercept_se).exp(), (l.intercept + t * l.intercept_se).exp()],
            },
        ]
    }

    fn admissible(&self, p: &[Param]) -> bool {
        p[0].value > 0.0
    }
}

impl RateFamily for Stretched {
    fn name(&self) -> &'static str {
        "stretched"
    }

    fn family(&self) -> Family {
        Family::Stretched
    }

    fn linearize(&self, n: f64, y: f64) -> Option<(f64, f64)> {
        (n > 0.0 && y > 0.0 && y < 1.0).then(|| (n.ln(), (-y.ln()).ln()))
    }

    fn params(&self, l: &LineFit, t: f64) -> Vec<Param> {
        vec![
            Param { name: "a".into(), value: l.slope, ci: interval(l.slope, t * l.slope_se) },
            Param {
                name: "c".into(),
                value: l.intercept.exp(),
                ci: [(l.intercept - t * l.intercept_se).exp(), (l.intercept + t * l.intercept_se).exp()],
            },
        ]
    }

    fn admissible(&self, p: &[Param]) -> bool {
        p[0].value > 0.0 && p[0].value <= 1.0 + 1e-9 && p[1].value > 0.0
    }
}

/// Named rate families.
pub struct FamilyRegistry {
    families: BTreeMap<&'static str, Box<dyn RateFamily>>,
}

impl FamilyRegistry {
    pub fn builtin() -> Self {
        let mut r = Self { families: BTreeMap::new() };
        r.register(Box::new(Polynomial));
        r.register(Box::new(Exponential));
        r.register(Box::new(Stretched));
        r
    }

    pub fn register(&mut self, f: Box<dyn RateFamily>) {
        self.families.insert(f.name(), f);
    }

    pub fn get(&self, name: &str) -> Result<&dyn RateFamily> {
        self.families
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Unknown { kind: "rate family", name: name.into() })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.families.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn RateFamily> {
        self.families.values().map(|b| b.as_ref())
    }
}

pub const MIN_FIT_POINTS: usize = 8;

fn fit_with(family: &dyn RateFamily, points: &[(f64, f64)], window: FitWindow) -> Result<RateFit> {
    let lin: Vec<(f64, f64)> = points
        .iter()
        .filter(|(n, _)| window.contains(*n))
        .filter_map(|&(n, y)| family.linearize(n, y))
        .collect();
    if lin.len() < MIN_FIT_POINTS {
        return Err(Error::TooFewPoints { needed: MIN_FIT_POINTS, got: lin.len() });
    }
    let used: Vec<f64> = points
        .iter()
        .filter(|(n, y)| window.contains(*n) && family.linearize(*n, *y).is_some())
        .map(|p| p.0)
        .collect();
    let (lo, hi) = used.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &n| (a.min(n), b.max(n)));
    if !(lo > 0.0) || hi / lo < 10f64.sqrt() {
        return Err(Error::IllConditioned(format!("window [{lo}, {hi}] spans less than half a decade")));
    }
    let line = fit_line(&lin)?;
    let t = StudentsT::new(0.0, 1.0, (line.n - 2) as f64)
        .map(|d| d.inverse_cdf(0.975))
        .unwrap_or(1.96);
    let params = family.params(&line, t);
    if !family.admissible(&params) {
        return Err(Error::IllConditioned(format!(
            "{} fit has inadmissible parameters ({} = {:.4})",
            family.name(),
            params[0].name,
            params[0].value
        )));
    }
    Ok(RateFit { family: family.family(), params, window: [lo, hi], r2: line.r2, points: line.n })
}

/// Fits `points = (n, y)` inside `window`. `family = None` tries every
/// registered family and keeps the best r²; near-ties go to the family
/// tried first (exponential, polynomial, stretched).
pub fn fit_rate(points: &[(f64, f64)], family: Option<&str>, window: FitWindow) -> Result<RateFit> {
    let reg = FamilyRegistry::builtin();
    match family {
        Some(name) => fit_with(reg.get(name)?, points, window),
        None => {
            let mut best: Option<RateFit> = None;
            let mut last_err = None;
            for f in reg.iter() {
                match fit_with(f, points, window) {
                    Ok(fit) => {
                        if best.as_ref().is_none_or(|b| fit.r2 > b.r2 + 1e-9) {
                            best = Some(fit);
                        }
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            best.ok_or_else(|| last_err.unwrap_or(Error::TooFewPoints { needed: MIN_FIT_POINTS, got: 0 }))
        }
    }
}

/// Integers spread evenly on a log scale, deduplicated.
pub fn log_grid(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    let (a, b) = ((lo.max(1) as f64).ln(), (hi.max(lo.max(1)) as f64).ln());
    let mut out: Vec<usize> = (0..count)
        .map(|i| {
            let t = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.0 };
            (a + t * (b - a)).exp().round() as usize
        })
        .collect();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_self_test() {
        let pts: Vec<(f64, f64)> = (10..=1000).step_by(10).map(|n| (n as f64, 100.0 * (n as f64).powf(-1.5))).collect();
        let f = fit_rate(&pts, Some("polynomial"), FitWindow::new(10.0, 1000.0)).unwrap();
        assert!((f.rate() - 1.5).abs() < 0.01);
        assert!((f.param("prefactor").unwrap().value - 100.0).abs() < 1e-6);
    }

    #[test]
    fn stretched_self_test() {
        let pts: Vec<(f64, f64)> =
            (1..=200).map(|n| (n as f64, (-0.3 * (n as f64).powf(0.5)).exp())).collect();
        let f = fit_rate(&pts, Some("stretched"), FitWindow::new(1.0, 200.0)).unwrap();
        assert!((f.rate() - 0.5).abs() < 0.01);
        assert!((f.param("c").unwrap().value - 0.3).abs() < 0.006);
    }

    #[test]
    fn short_window_is_ill_conditioned() {
        let pts: Vec<(f64, f64)> = (10..=30).map(|n| (n as f64, (n as f64).powf(-2.0))).collect();
        assert!(matches!(
            fit_rate(&pts, Some("polynomial"), FitWindow::new(10.0, 30.0)),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn auto_prefers_exponential_for_geometric_curve() {
        let pts: Vec<(f64, f64)> = (1..=40).map(|n| (n as f64, 0.5f64.powi(n))).collect();
        let f = fit_rate(&pts, None, FitWindow::new(1.0, 40.0)).unwrap();
        assert_eq!(f.family, Family::Exponential);
        assert!(f.r2 > 0.99);
    }

    #[test]
    fn log_grid_is_increasing() {
        let g = log_grid(10, 1000, 20);
        assert_eq!(g[0], 10);
        assert_eq!(*g.last().unwrap(), 1000);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }
}
