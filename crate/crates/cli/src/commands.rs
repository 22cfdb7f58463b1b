//! The subcommands. Each one reads the shared context, writes its files into
//! a run directory and returns its assertions.

use std::cell::OnceCell;
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};
use towerlab::coupling::{
    certify_schedule, increment_slopes, survival_curve, trace_dump, PairContext, PairSamplerRegistry,
    SurvivalOptions,
};
use towerlab::maps::{DynamicalMap, SchemeOptions, System, SystemRegistry};
use towerlab::rng::splitmix64;
use towerlab::scheme::{
    estimate_tail_with, integrability_report, verify_wgm, InducingScheme, SchemeDocument, TailOptions,
};
use towerlab::stats::{
    clt_check, correlation_series, fit_rate, green_kubo_sigma2, ld_curve, log_grid, CltVerdict, FitWindow,
    LdOptions, Observable, ObservableRegistry, ObservableSpec,
};
use towerlab::stats::fit::FamilyRegistry;
use towerlab::structure::{build_graph, classify_mixing_with, MixingVerdict, Verdict};
use towerlab::tower::density::CAUCHY_TOL;
use towerlab::tower::{build_tower, invariant_density_on, TransferOperator};
use towerlab::Error;

use crate::config::{CltExpectation, RunConfig};
use crate::manifest::RunDir;

/// Why a command stopped early.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numerical { kind: String, message: String },
    Io(String),
}

impl Failure {
    fn numerical(e: Error) -> Self {
        match e {
            Error::Unknown { .. } | Error::Json(_) => Failure::Config(e.to_string()),
            e => Failure::Numerical { kind: variant_name(&e), message: e.to_string() },
        }
    }

    fn setup(e: Error) -> Self {
        match e {
            Error::Unknown { .. } | Error::Json(_) | Error::InvalidParameter(_) => Failure::Config(e.to_string()),
            e => Failure::numerical(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn variant_name(e: &Error) -> String {
    format!("{e:?}").chars().take_while(|c| c.is_alphanumeric()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.into(), passed, detail }
    }
}

/// What a command hands back to the driver.
#[derive(Debug, Default)]
pub struct Outcome {
    /// Exit code the command asks for independent of assertions.
    pub code: i32,
    pub assertions: Vec<Assertion>,
}

/// Per-purpose seed derived from the run seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    label.bytes().fold(splitmix64(seed), |acc, b| splitmix64(acc ^ b as u64))
}

pub struct Context {
    pub cfg: RunConfig,
    system: Option<Box<dyn System>>,
    map: Arc<dyn DynamicalMap>,
    custom: Option<SchemeDocument>,
    observables: ObservableRegistry,
    scheme: OnceCell<Arc<InducingScheme>>,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Self, Failure> {
        let registry = SystemRegistry::builtin();
        let (system, map, custom) = if cfg.system.name == "custom" {
            let path = cfg.system.scheme_file.as_ref().ok_or_else(|| Failure::Config("custom needs scheme_file".into()))?;
            let bytes = std::fs::read(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            let doc: SchemeDocument =
                serde_json::from_slice(&bytes).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            let map = registry.map_from_id(&doc.map_id, &doc.params).map_err(Failure::setup)?;
            (None, map, Some(doc))
        } else {
            let system = registry.build(&cfg.system.name, &Value::Object(cfg.system.params.clone())).map_err(Failure::setup)?;
            let map = system.map();
            (Some(system), map, None)
        };
        Ok(Self { cfg, system, map, custom, observables: ObservableRegistry::builtin(), scheme: OnceCell::new() })
    }

    fn scheme(&self) -> Result<Arc<InducingScheme>, Failure> {
        if let Some(s) = self.scheme.get() {
            return Ok(s.clone());
        }
        let s = match (&self.system, &self.custom) {
            (Some(sys), _) => sys
                .scheme(&SchemeOptions {
                    horizon: self.cfg.horizon,
                    discard_threshold: self.cfg.scheme.discard_threshold,
                    strips: self.cfg.scheme.strips,
                    points_per_strip: self.cfg.budgets.points_per_strip,
                    seed: derive_seed(self.cfg.seed, "scheme"),
                })
                .map_err(Failure::setup)?,
            (None, Some(doc)) => InducingScheme::from_document(doc.clone(), self.map.clone()).map_err(Failure::setup)?,
            (None, None) => unreachable!("context holds a system or a scheme document"),
        };
        let s = Arc::new(s);
        let _ = self.scheme.set(s.clone());
        Ok(s)
    }

    fn predicted_exponent(&self) -> Option<f64> {
        self.system.as_ref().and_then(|s| s.predicted_tail_exponent())
    }

    fn observable(&self, spec: &ObservableSpec) -> Result<Observable, Failure> {
        self.observables.build(spec, &self.map).map_err(Failure::setup)
    }

    fn header(&self, command: &str) -> Value {
        json!({ "command": command, "system": self.cfg.system, "seed": self.cfg.seed })
    }

    fn mixing_verdict(&self, scheme: &InducingScheme) -> Result<MixingVerdict, Failure> {
        let g = build_graph(scheme).map_err(Failure::numerical)?;
        Ok(classify_mixing_with(&g, self.cfg.structure.horizon, self.cfg.structure.max_block))
    }
}

fn window(w: [f64; 2]) -> FitWindow {
    FitWindow::new(w[0], w[1])
}

fn family_name(name: &Option<String>) -> Result<Option<&'static str>, Failure> {
    match name {
        None => Ok(None),
        Some(n) => FamilyRegistry::builtin()
            .names()
            .into_iter()
            .find(|k| k == n)
            .map(Some)
            .ok_or_else(|| Failure::Config(format!("unknown rate family '{n}'"))),
    }
}

fn with_assertions(mut report: Value, assertions: &[Assertion]) -> Value {
    report["assertions"] = serde_json::to_value(assertions).unwrap_or(Value::Null);
    report
}

pub fn structure(ctx: &Context, dir: &mut RunDir, prefix: &str) -> Result<Outcome, Failure> {
    let scheme = ctx.scheme()?;
    let verdict = ctx.mixing_verdict(&scheme)?;
    let (wgm, wgm_note) = if ctx.cfg.budgets.wgm == 0 {
        (None, Some("skipped: budgets.wgm = 0".to_string()))
    } else {
        match verify_wgm(&scheme, ctx.cfg.budgets.wgm, ctx.cfg.structure.separation_cap, derive_seed(ctx.cfg.seed, "wgm")) {
            Ok(c) => (Some(c), None),
            Err(e @ Error::JacobianUnavailable(_)) => (None, Some(e.to_string())),
            Err(e) => return Err(Failure::numerical(e)),
        }
    };
    let rows: Vec<Vec<String>> = scheme
        .cells()
        .iter()
        .map(|c| {
            let image: Vec<String> = c.image.ranges().iter().map(|r| format!("{}-{}", r[0], r[1])).collect();
            vec![
                c.symbol.to_string(),
                c.return_time.to_string(),
                c.measure.to_string(),
                c.image_measure.to_string(),
                image.join(";"),
            ]
        })
        .collect();
    dir.write(
        &format!("{prefix}cells.csv"),
        towerlab::io::csv(&["symbol", "return_time", "measure", "image_measure", "image_ranges"], &rows).as_bytes(),
    )?;
    dir.write_json(&format!("{prefix}scheme.json"), &scheme.to_document())?;
    let mut report = ctx.header("structure");
    report["scheme_hash"] = json!(scheme.content_hash());
    report["cells"] = json!(scheme.len());
    report["truncation"] = json!({
        "horizon": scheme.truncation().horizon,
        "discarded_mass": scheme.truncation().discarded_mass,
    });
    report["mixing"] = serde_json::to_value(&verdict).map_err(|e| Failure::Io(e.to_string()))?;
    report["wgm"] = json!(wgm);
    report["wgm_note"] = json!(wgm_note);
    dir.write_json(&format!("{prefix}report.json"), &with_assertions(report, &[]))?;
    let code = match verdict.verdict {
        Verdict::MixingCertified => 0,
        Verdict::NonMixingCertified => 2,
        Verdict::Inconclusive => 3,
    };
    Ok(Outcome { code, assertions: Vec::new() })
}

pub fn tails(ctx: &Context, dir: &mut RunDir, prefix: &str) -> Result<Outcome, Failure> {
    let cfg = &ctx.cfg.tails;
    let scheme = ctx.scheme()?;
    let tail = estimate_tail_with(&scheme, TailOptions { window: cfg.window.map(window), family: family_name(&cfg.family)? });
    let integrability = integrability_report(&tail, 0.05);
    let predicted = ctx.predicted_exponent();
    let mut assertions = Vec::new();
    if let Some(expected) = cfg.expect_exponent.or(predicted) {
        let tol = cfg.tolerance.unwrap_or(0.25);
        let a = match &tail.fit {
            Some(f) if f.family == towerlab::stats::Family::Polynomial => {
                let a = f.rate();
                Assertion::new("tail_exponent", (a - expected).abs() <= tol, format!("a = {a:.4}, expected {expected:.4} ± {tol}"))
            }
            Some(f) => Assertion::new("tail_exponent", false, format!("fit family is {:?}, not polynomial", f.family)),
            None => Assertion::new("tail_exponent", false, format!("no fit: {}", tail.fit_error.clone().unwrap_or_default())),
        };
        assertions.push(a);
    }
    dir.write(&format!("{prefix}tails.csv"), tail.to_csv().as_bytes())?;
    let mut report = ctx.header("tails");
    report["horizon"] = json!(tail.horizon);
    report["base_measure"] = json!(tail.base_measure);
    report["discarded_mass"] = json!(tail.discarded_mass);
    report["fit"] = json!(tail.fit);
    report["fit_error"] = json!(tail.fit_error);
    report["predicted_exponent"] = json!(predicted);
    report["integrability"] = json!(integrability);
    dir.write_json(&format!("{prefix}report.json"), &with_assertions(report, &assertions))?;
    Ok(Outcome { code: 0, assertions })
}

/// Assertion floor for decay-type exponents: `a − 1 − 0.3` when `a` is known.
fn exponent_floor(explicit: Option<f64>, predicted: Option<f64>) -> Option<f64> {
    explicit.or(predicted.map(|a| a - 1.0 - 0.3))
}

pub fn decay(ctx: &Context, dir: &mut RunDir, prefix: &str) -> Result<Outcome, Failure> {
    let cfg = &ctx.cfg.decay;
    let phi = ctx.observable(&cfg.phi)?;
    let psi = ctx.observable(&cfg.psi)?;
    let [lo, hi, count] = cfg.lags;
    let lags = log_grid(lo, hi, count);
    let series = correlation_series(
        ctx.map.as_ref(),
        &phi,
        &psi,
        &lags,
        ctx.cfg.budgets.correlation,
        derive_seed(ctx.cfg.seed, "decay"),
        cfg.ensemble,
    )
    .map_err(Failure::numerical)?;
    let (fit, fit_error) = match series.fit_polynomial(window(cfg.window)) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let mut assertions = Vec::new();
    if let Some(floor) = exponent_floor(cfg.min_exponent, ctx.predicted_exponent()) {
        assertions.push(match &fit {
            Some(f) => Assertion::new(
                "correlation_exponent",
                f.rate() >= floor,
                format!("exponent {:.4} (95% CI {:?}), floor {floor:.4}", f.rate(), f.rate_ci()),
            ),
            None => Assertion::new("correlation_exponent", false, format!("no fit: {}", fit_error.clone().unwrap_or_default())),
        });
    }
    dir.write(&format!("{prefix}correlations.csv"), series.to_csv().as_bytes())?;
    let mut report = ctx.header("decay");
    report["phi"] = json!(phi.label);
    report["psi"] = json!(psi.label);
    report["sample_budget"] = json!(series.sample_budget);
    report["batches"] = json!(series.batches);
    report["var_phi"] = json!(series.var_phi);
    report["var_psi"] = json!(series.var_psi);
    report["fit"] = json!(fit);
    report["fit_error"] = json!(fit_error);
    dir.write_json(&format!("{prefix}report.json"), &with_assertions(report, &assertions))?;
    Ok(Outcome { code: 0, assertions })
}

pub fn clt(ctx: &Context, dir: &mut RunDir, prefix: &str) -> Result<Outcome, Failure> {
    let cfg = &ctx.cfg.clt;
    let phi = ctx.observable(&cfg.phi)?;
    let map = ctx.map.as_ref();
    let gk = green_kubo_sigma2(map, &phi, cfg.lag_cap, ctx.cfg.budgets.green_kubo, derive_seed(ctx.cfg.seed, "green-kubo"), cfg.ensemble)
        .map_err(Failure::numerical)?;
    let rep = clt_check(map, &phi, &cfg.n_grid, ctx.cfg.budgets.clt, derive_seed(ctx.cfg.seed, "clt"), &gk, cfg.ensemble)
        .map_err(Failure::numerical)?;
    let mut assertions = Vec::new();
    let want = match cfg.expect {
        CltExpectation::ConsistentWithClt => CltVerdict::ConsistentWithClt,
        CltExpectation::Degenerate => CltVerdict::Degenerate,
    };
    assertions.push(Assertion::new("clt_verdict", rep.verdict == want, format!("{:?}, expected {:?}", rep.verdict, want)));
    if let Some([target, tol]) = cfg.expect_sigma2 {
        assertions.push(Assertion::new(
            "sigma2",
            (gk.sigma2 - target).abs() <= tol,
            format!("σ² = {:.5} ± {:.5}, expected {target} ± {tol}", gk.sigma2, gk.ci),
        ));
    }
    let control = match &cfg.control {
        Some(spec) => {
            let obs = ctx.observable(spec)?;
            let c = green_kubo_sigma2(map, &obs, cfg.lag_cap, ctx.cfg.budgets.green_kubo, derive_seed(ctx.cfg.seed, "control"), cfg.ensemble)
                .map_err(Failure::numerical)?;
            assertions.push(Assertion::new(
                "control_degenerate",
                c.degenerate(),
                format!("control σ² = {:.3e} ± {:.3e}", c.sigma2, c.ci),
            ));
            Some(json!({ "observable": obs.label, "green_kubo": c, "degenerate": c.degenerate() }))
        }
        None => None,
    };
    let rows: Vec<Vec<String>> = (0..rep.n_grid.len())
        .map(|i| vec![rep.n_grid[i].to_string(), rep.ks_distance[i].to_string(), rep.thresholds[i].to_string()])
        .collect();
    dir.write(&format!("{prefix}clt.csv"), towerlab::io::csv(&["n", "ks_distance", "threshold"], &rows).as_bytes())?;
    let mut report = ctx.header("clt");
    report["phi"] = json!(phi.label);
    report["green_kubo"] = json!(gk);
    report["clt"] = json!(rep);
    report["control"] = json!(control);
    dir.write_json(&format!("{prefix}report.json"), &with_assertions(report, &assertions))?;
    Ok(Outcome { code: 0, assertions })
}

pub fn ld(ctx: &Context, dir: &mut RunDir, prefix: &str) -> Result<Outcome, Failure> {
    let cfg = &ctx.cfg.ld;
    let phi = ctx.observable(&cfg.phi)?;
    family_name(&cfg.family)?;
    let rep = ld_curve(
        ctx.map.as_ref(),
        &phi,
        cfg.epsilon,
        &cfg.n_grid,
        ctx.cfg.budgets.ld,
        derive_seed(ctx.cfg.seed, "ld"),
        cfg.ensemble,
        &LdOptions { family: cfg.family.clone(), mean: cfg.mean },
    )
    .map_err(Failure::setup)?;
    let mut assertions = Vec::new();
    if let Some(floor) = exponent_floor(cfg.min_exponent, ctx.predicted_exponent()) {
        assertions.push(match &rep.fit {
            Some(f) => Assertion::new(
                "ld_exponent",
                f.rate() >= floor,
                format!("{:?} rate {:.4} (95% CI {:?}), floor {floor:.4}", f.family, f.rate(), f.rate_ci()),
            ),
            None => Assertion::new("ld_exponent", false, format!("no fit: {}", rep.fit_error.clone().unwrap_or_default())),
        });
    }
    dir.write(&format!("{prefix}ld.csv"), rep.to_csv().as_bytes())?;
    let mut report = ctx.header("ld");
    report["phi"] = json!(phi.label);
    report["ld"] = json!(rep);
    dir.write_json(&format!("{prefix}report.json"), &with_assertions(report, &assertions))?;
    Ok(Outcome { code: 0, assertions })
}

pub fn couple(ctx: &Context, dir: &mut RunDir, prefix: &str) -> Result<Outcome, Failure> {
    let cfg = &ctx.cfg.couple;
    let scheme = ctx.scheme()?;
    let tower = build_tower(scheme.clone(), ctx.cfg.height_cap as u32).map_err(Failure::setup)?;
    let op = Arc::new(TransferOperator::new(&tower, ctx.cfg.grid_resolution).map_err(Failure::numerical)?);
    let verdict = ctx.mixing_verdict(&scheme)?;
    let schedule = certify_schedule(&tower, &op, &verdict, cfg.schedule).map_err(Failure::numerical)?;
    let invariant = if cfg.sampler == "reference" {
        None
    } else {
        Some(invariant_density_on(op.clone(), 20_000, CAUCHY_TOL).map_err(Failure::numerical)?)
    };
    let pctx = PairContext { tower: &tower, invariant: invariant.as_ref(), observables: &ctx.observables };
    let sampler = PairSamplerRegistry::builtin().build(&cfg.sampler, &cfg.sampler_params, &pctx).map_err(Failure::setup)?;
    let opts = SurvivalOptions { pairs: ctx.cfg.budgets.pairs, ..cfg.survival };
    let seed = derive_seed(ctx.cfg.seed, "pairs");
    let curve = survival_curve(&tower, &schedule, sampler.as_ref(), seed, &opts).map_err(Failure::numerical)?;
    let tail = towerlab::scheme::estimate_tail(&scheme);
    let slopes = increment_slopes(&curve, &tail.hat_counts, window(cfg.window), cfg.slope_slack);
    let pts: Vec<(f64, f64)> =
        curve.values.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(n, &v)| (n as f64, v)).collect();
    let (fit, fit_error) = match fit_rate(&pts, None, window(cfg.window)) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };

    let mut assertions = Vec::new();
    // a stratum nobody reaches carries no information either way
    let weak: Vec<String> = curve
        .strata
        .iter()
        .filter(|s| s.at_risk > 0 && s.ci[0] <= 0.0)
        .map(|s| format!("k={} at_risk={} ci={:?}", s.k, s.at_risk, s.ci))
        .collect();
    let empty: Vec<usize> = curve.strata.iter().filter(|s| s.at_risk == 0).map(|s| s.k).collect();
    assertions.push(Assertion::new(
        "strata_ci_excludes_zero",
        weak.is_empty(),
        if weak.is_empty() {
            format!("ε̂₀ = {:?}; strata never reached: {empty:?}", curve.epsilon0())
        } else {
            weak.join("; ")
        },
    ));
    let failing: Vec<String> = slopes.iter().filter(|s| !s.passed).map(|s| format!("{s:?}")).collect();
    assertions.push(Assertion::new(
        "increment_tails",
        failing.is_empty(),
        if failing.is_empty() { format!("{} strata checked", slopes.len()) } else { failing.join("; ") },
    ));

    dir.write(&format!("{prefix}survival.csv"), curve.to_csv().as_bytes())?;
    let strata: Vec<Vec<String>> = curve
        .strata
        .iter()
        .map(|s| {
            vec![
                s.k.to_string(),
                s.at_risk.to_string(),
                s.successes.to_string(),
                s.frequency.to_string(),
                s.ci[0].to_string(),
                s.ci[1].to_string(),
            ]
        })
        .collect();
    dir.write(
        &format!("{prefix}strata.csv"),
        towerlab::io::csv(&["k", "at_risk", "successes", "frequency", "ci_lo", "ci_hi"], &strata).as_bytes(),
    )?;
    let incr: Vec<Vec<String>> = curve
        .increments
        .iter()
        .flat_map(|inc| inc.tail.iter().enumerate().map(move |(n, p)| vec![inc.k.to_string(), n.to_string(), p.to_string()]))
        .collect();
    dir.write(&format!("{prefix}increments.csv"), towerlab::io::csv(&["k", "n", "tail"], &incr).as_bytes())?;
    dir.write_json(&format!("{prefix}schedule.json"), &schedule)?;
    if cfg.dump_traces > 0 {
        let traces = trace_dump(&tower, &schedule, sampler.as_ref(), seed, cfg.dump_traces, opts.max_index)
            .map_err(Failure::numerical)?;
        dir.write(&format!("{prefix}traces.jsonl"), traces.as_bytes())?;
    }
    let mut report = ctx.header("couple");
    report["sampler"] = json!(curve.sampler);
    report["n0"] = json!(schedule.n0);
    report["gamma0"] = json!(schedule.gamma0);
    report["sample_count"] = json!(curve.sample_count);
    report["censored"] = json!(curve.censored);
    report["escaped"] = json!(curve.escaped);
    report["epsilon0"] = json!(curve.epsilon0());
    report["survival_fit"] = json!(fit);
    report["survival_fit_error"] = json!(fit_error);
    report["increment_slopes"] = json!(slopes);
    dir.write_json(&format!("{prefix}report.json"), &with_assertions(report, &assertions))?;
    Ok(Outcome { code: 0, assertions })
}
