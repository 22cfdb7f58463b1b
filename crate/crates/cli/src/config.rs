//! Run configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use towerlab::coupling::{ScheduleOptions, SurvivalOptions};
use towerlab::stats::{EnsembleOptions, ObservableSpec};

/// Which system to study. Every name except `custom` is looked up in the
/// system registry with the remaining fields as parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub name: String,
    /// Scheme document for `custom`, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme_file: Option<PathBuf>,
    #[serde(flatten)]
    pub params: serde_json::Map<String, Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub correlation: usize,
    pub green_kubo: usize,
    pub clt: usize,
    pub ld: usize,
    pub pairs: usize,
    pub wgm: usize,
    pub points_per_strip: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            correlation: 100_000,
            green_kubo: 100_000,
            clt: 10_000,
            ld: 10_000,
            pairs: 10_000,
            wgm: 2_000,
            points_per_strip: 100_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeSection {
    pub discard_threshold: f64,
    pub strips: usize,
}

impl Default for SchemeSection {
    fn default() -> Self {
        Self { discard_threshold: 1e-3, strips: 16 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureSection {
    pub horizon: usize,
    pub max_block: usize,
    pub separation_cap: usize,
}

impl Default for StructureSection {
    fn default() -> Self {
        Self { horizon: 200, max_block: 4, separation_cap: 40 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailsSection {
    pub window: Option<[f64; 2]>,
    pub family: Option<String>,
    /// Exponent to assert against; the system's prediction when absent.
    pub expect_exponent: Option<f64>,
    pub tolerance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecaySection {
    pub phi: ObservableSpec,
    pub psi: ObservableSpec,
    /// `[lo, hi, count]` for a log-spaced lag grid.
    pub lags: [usize; 3],
    pub window: [f64; 2],
    pub min_exponent: Option<f64>,
    pub ensemble: EnsembleOptions,
}

impl Default for DecaySection {
    fn default() -> Self {
        Self {
            phi: ObservableSpec::named("cospi"),
            psi: ObservableSpec::named("cospi"),
            lags: [1, 300, 40],
            window: [10.0, 300.0],
            min_exponent: None,
            ensemble: EnsembleOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CltExpectation {
    ConsistentWithClt,
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CltSection {
    pub phi: ObservableSpec,
    pub n_grid: Vec<usize>,
    pub lag_cap: usize,
    /// Second observable run through Green–Kubo only, expected degenerate.
    pub control: Option<ObservableSpec>,
    pub expect: CltExpectation,
    /// `σ²` the assertion compares against, with its tolerance.
    pub expect_sigma2: Option<[f64; 2]>,
    pub ensemble: EnsembleOptions,
}

impl Default for CltSection {
    fn default() -> Self {
        Self {
            phi: ObservableSpec::named("cos2pi"),
            n_grid: vec![100, 1000],
            lag_cap: 40,
            control: None,
            expect: CltExpectation::ConsistentWithClt,
            expect_sigma2: None,
            ensemble: EnsembleOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdSection {
    pub phi: ObservableSpec,
    pub epsilon: f64,
    pub n_grid: Vec<usize>,
    pub family: Option<String>,
    pub mean: Option<f64>,
    pub min_exponent: Option<f64>,
    pub ensemble: EnsembleOptions,
}

impl Default for LdSection {
    fn default() -> Self {
        Self {
            phi: ObservableSpec::named("cospi"),
            epsilon: 0.1,
            n_grid: vec![100, 1000],
            family: Some("polynomial".into()),
            mean: None,
            min_exponent: None,
            ensemble: EnsembleOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoupleSection {
    pub sampler: String,
    pub sampler_params: Value,
    pub schedule: ScheduleOptions,
    pub survival: SurvivalOptions,
    /// Polynomial window for increment and survival fits.
    pub window: [f64; 2],
    /// Allowed shortfall of an increment-tail exponent below that of `m{R̂ > n}`.
    pub slope_slack: f64,
    /// Traces written to `traces.jsonl`.
    pub dump_traces: usize,
}

impl Default for CoupleSection {
    fn default() -> Self {
        Self {
            sampler: "reference".into(),
            sampler_params: Value::Null,
            schedule: ScheduleOptions::default(),
            survival: SurvivalOptions::default(),
            window: [10.0, 100.0],
            slope_slack: 0.2,
            dump_traces: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub seed: u64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_horizon")]
    pub height_cap: usize,
    #[serde(default = "default_resolution")]
    pub grid_resolution: usize,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub scheme: SchemeSection,
    #[serde(default)]
    pub structure: StructureSection,
    #[serde(default)]
    pub tails: TailsSection,
    #[serde(default)]
    pub decay: DecaySection,
    #[serde(default)]
    pub clt: CltSection,
    #[serde(default)]
    pub ld: LdSection,
    #[serde(default)]
    pub couple: CoupleSection,
}

fn default_horizon() -> usize {
    1000
}

fn default_resolution() -> usize {
    2
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), ConfigError> {
        let bytes = std::fs::read(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(text)?;
        if let (Some(file), Some(dir)) = (&cfg.system.scheme_file, path.parent()) {
            if file.is_relative() {
                cfg.system.scheme_file = Some(dir.join(file));
            }
        }
        Ok((cfg, bytes))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let b = &self.budgets;
        let positive = [
            ("horizon", self.horizon),
            ("height_cap", self.height_cap),
            ("grid_resolution", self.grid_resolution),
            ("budgets.correlation", b.correlation),
            ("budgets.green_kubo", b.green_kubo),
            ("budgets.clt", b.clt),
            ("budgets.ld", b.ld),
            ("budgets.pairs", b.pairs),
            ("budgets.points_per_strip", b.points_per_strip),
            ("structure.horizon", self.structure.horizon),
            ("couple.survival.horizon", self.couple.survival.horizon),
            ("couple.schedule.horizon", self.couple.schedule.horizon),
            ("couple.schedule.window", self.couple.schedule.window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError(format!("{name} must be positive")));
            }
        }
        if self.system.name == "custom" && self.system.scheme_file.is_none() {
            return Err(ConfigError("system 'custom' needs scheme_file".into()));
        }
        if self.clt.n_grid.is_empty() || self.ld.n_grid.is_empty() {
            return Err(ConfigError("clt.n_grid and ld.n_grid must not be empty".into()));
        }
        let [lo, hi, count] = self.decay.lags;
        if lo == 0 || hi < lo || count == 0 {
            return Err(ConfigError(format!("decay.lags {:?} is not a grid", self.decay.lags)));
        }
        Ok(())
    }

    /// The configuration as hashed into the manifest: the output location is
    /// left out so that moving a run does not change its identity.
    pub fn canonical(&self) -> Value {
        let mut v = serde_json::to_value(self).unwrap_or(Value::Null);
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        v
    }
}
