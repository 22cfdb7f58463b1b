//! Configuration-driven front end: one run directory per invocation, holding
//! `report.json`, plot-ready CSV files and `manifest.json`.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

use commands::{Context, Failure, Outcome};
use config::RunConfig;
use manifest::{InputEntry, RunDir, RunManifest};

pub const EXIT_ASSERT: i32 = 1;
pub const EXIT_NON_MIXING: i32 = 2;
pub const EXIT_INCONCLUSIVE: i32 = 3;
pub const EXIT_CONFIG: i32 = 64;
pub const EXIT_NUMERICAL: i32 = 65;
pub const EXIT_IO: i32 = 74;

#[derive(Debug, Parser)]
#[command(name = "towerlab", version, about = "Young towers, coupling and limit laws for intermittent maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,

    /// Exit with status 1 when any acceptance assertion fails.
    #[arg(long = "assert", global = true)]
    pub assert: bool,

    /// Run directory; overrides `output_dir` in the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Mixing verdict for the inducing scheme.
    Structure,
    /// Return-time tail and its fitted rate.
    Tails,
    /// Correlation decay of two observables.
    Decay,
    /// Green–Kubo variance and the CLT check.
    Clt,
    /// Large-deviation probabilities along a grid of times.
    Ld,
    /// Coupling survival curve and stopping-time statistics.
    Couple,
    /// Every subcommand above, each in its own subdirectory.
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Structure => "structure",
            Command::Tails => "tails",
            Command::Decay => "decay",
            Command::Clt => "clt",
            Command::Ld => "ld",
            Command::Couple => "couple",
            Command::All => "all",
        }
    }

    const EACH: [Command; 6] =
        [Command::Structure, Command::Tails, Command::Decay, Command::Clt, Command::Ld, Command::Couple];
}

fn dispatch(cmd: Command, ctx: &Context, dir: &mut RunDir, prefix: &str) -> Result<Outcome, Failure> {
    match cmd {
        Command::Structure => commands::structure(ctx, dir, prefix),
        Command::Tails => commands::tails(ctx, dir, prefix),
        Command::Decay => commands::decay(ctx, dir, prefix),
        Command::Clt => commands::clt(ctx, dir, prefix),
        Command::Ld => commands::ld(ctx, dir, prefix),
        Command::Couple => commands::couple(ctx, dir, prefix),
        Command::All => unreachable!("expanded by the driver"),
    }
}

/// Status of one subcommand after assertions are taken into account.
fn status(result: &Result<Outcome, Failure>, assert: bool) -> i32 {
    match result {
        Ok(o) if assert && o.assertions.iter().any(|a| !a.passed) => EXIT_ASSERT,
        Ok(o) => o.code,
        Err(Failure::Config(_)) => EXIT_CONFIG,
        Err(Failure::Numerical { .. }) => EXIT_NUMERICAL,
        Err(Failure::Io(_)) => EXIT_IO,
    }
}

/// Numerical failures outrank assertion failures, which outrank the
/// structure verdict.
fn combine(codes: &[i32]) -> i32 {
    let rank = |c: i32| match c {
        EXIT_CONFIG => 6,
        EXIT_IO => 5,
        EXIT_NUMERICAL => 4,
        EXIT_ASSERT => 3,
        EXIT_NON_MIXING => 2,
        EXIT_INCONCLUSIVE => 1,
        _ => 0,
    };
    codes.iter().copied().max_by_key(|&c| rank(c)).unwrap_or(0)
}

fn config_failure(msg: &str) -> i32 {
    eprintln!("towerlab: {msg}");
    EXIT_CONFIG
}

/// Runs the CLI and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let Some(path) = cli.config.as_ref() else {
        return config_failure("--config is required");
    };
    let (mut cfg, raw) = match RunConfig::load(path) {
        Ok(v) => v,
        Err(e) => return config_failure(&e.0),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let Some(out) = cli.out.clone().or_else(|| cfg.output_dir.clone()) else {
        return config_failure("no run directory: pass --out or set output_dir");
    };
    let config_hash = towerlab::io::sha256_hex(&serde_json::to_vec(&cfg.canonical()).unwrap_or_default());
    let mut inputs = vec![InputEntry { role: "config".into(), sha256: towerlab::io::sha256_hex(&raw) }];
    if let Some(f) = &cfg.system.scheme_file {
        if let Ok(b) = std::fs::read(f) {
            inputs.push(InputEntry { role: "scheme".into(), sha256: towerlab::io::sha256_hex(&b) });
        }
    }
    let started = manifest::now();
    let workers = cli.workers.max(1);
    let assert = cli.assert;
    let command = cli.command;
    let mut dir = RunDir::new(&out);

    let code = towerlab::parallel::with_workers(workers, || {
        let ctx = match Context::new(cfg.clone()) {
            Ok(c) => c,
            Err(Failure::Config(m)) => return config_failure(&m),
            Err(f) => return diagnose(&mut dir, command.name(), &f, ""),
        };
        let list: Vec<Command> = if command == Command::All { Command::EACH.to_vec() } else { vec![command] };
        let mut codes = Vec::new();
        let mut summary = Vec::new();
        for cmd in list {
            let prefix = if command == Command::All { format!("{}/", cmd.name()) } else { String::new() };
            let result = dispatch(cmd, &ctx, &mut dir, &prefix);
            let code = status(&result, assert);
            match &result {
                Ok(o) => {
                    for a in o.assertions.iter().filter(|a| !a.passed) {
                        eprintln!("towerlab {}: assertion {} failed: {}", cmd.name(), a.name, a.detail);
                    }
                }
                Err(Failure::Config(m)) => return config_failure(m),
                Err(f) => {
                    diagnose(&mut dir, cmd.name(), f, &prefix);
                }
            }
            summary.push(json!({ "command": cmd.name(), "exit_code": code }));
            codes.push(code);
        }
        if command == Command::All {
            if let Err(e) = dir.write_json("summary.json", &summary) {
                eprintln!("towerlab: {e}");
                return EXIT_IO;
            }
        }
        combine(&codes)
    });
    if code == EXIT_CONFIG {
        return code;
    }
    let manifest = RunManifest {
        command: command.name().into(),
        config_hash,
        code_version: format!("towerlab {}", env!("CARGO_PKG_VERSION")),
        started,
        finished: manifest::now(),
        inputs,
        outputs: Vec::new(),
    };
    match dir.finish(manifest) {
        Ok(_) => code,
        Err(e) => {
            eprintln!("towerlab: {e}");
            EXIT_IO
        }
    }
}

/// Writes `diagnostic.json` for a failed subcommand and reports its status.
fn diagnose(dir: &mut RunDir, command: &str, f: &Failure, prefix: &str) -> i32 {
    let (kind, message, code) = match f {
        Failure::Config(m) => ("Config".to_string(), m.clone(), EXIT_CONFIG),
        Failure::Numerical { kind, message } => (kind.clone(), message.clone(), EXIT_NUMERICAL),
        Failure::Io(m) => ("Io".to_string(), m.clone(), EXIT_IO),
    };
    let diag = json!({ "command": command, "error": kind, "message": message, "exit_code": code });
    eprintln!("towerlab {command}: {kind}: {message}");
    if let Err(e) = dir.write_json(&format!("{prefix}diagnostic.json"), &diag) {
        eprintln!("towerlab: {e}");
    }
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_failures_dominate() {
        assert_eq!(combine(&[0, EXIT_NON_MIXING, EXIT_NUMERICAL, EXIT_ASSERT]), EXIT_NUMERICAL);
        assert_eq!(combine(&[EXIT_INCONCLUSIVE, EXIT_ASSERT]), EXIT_ASSERT);
        assert_eq!(combine(&[0, EXIT_INCONCLUSIVE]), EXIT_INCONCLUSIVE);
        assert_eq!(combine(&[]), 0);
    }

    #[test]
    fn cli_parses_global_flags_after_the_subcommand() {
        let cli = Cli::try_parse_from(["towerlab", "clt", "--config", "c.json", "--seed", "4", "--workers", "8", "--assert"])
            .unwrap();
        assert_eq!(cli.command, Command::Clt);
        assert_eq!((cli.seed, cli.workers, cli.assert), (Some(4), 8, true));
    }
}
