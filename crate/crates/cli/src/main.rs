use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use capergo::registry;
use capergo::runner::{
    apply_overrides, load_scenario, run_scenario, run_scenario_parallel, write_outputs,
};
use capergo::scenario::{CheckKind, SystemSpec};
use capergo_core::cocycle::lyapunov_qr;
use capergo_core::intervaldyn::{scalar_from_json, PiecewiseAffineMap};
use capergo_core::setfun::{classify_capacity, core_vertices, SetFunctionSpec, DEFAULT_CORE_LIMIT};
use capergo_core::Rational;
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "capergo", version, about = "Ergodic checks for capacities and upper probabilities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a built-in scenario or a scenario file.
    Run {
        target: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "CAPERGO_OUT", default_value = "capergo-out")]
        out: PathBuf,
        /// `key=value`; dotted paths reach into the scenario (`checks.0.n=1000`).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Run checks on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// List built-in scenarios.
    List,
    /// Classify a set function given as JSON.
    CheckCapacity { file: PathBuf },
    /// Enumerate the core of a set function given as JSON.
    Core {
        file: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CORE_LIMIT)]
        limit: usize,
    },
    /// Print the Lyapunov spectrum CSV of a cocycle scenario.
    Lyapunov {
        scenario: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read_spec(file: &PathBuf) -> anyhow::Result<SetFunctionSpec> {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))
}

fn dispatch(cmd: Command) -> anyhow::Result<bool> {
    match cmd {
        Command::Run { target, seed, out, mut sets, parallel } => {
            if let Some(seed) = seed {
                sets.push(format!("seed={seed}"));
            }
            let scenario = apply_overrides(&load_scenario(&target)?, &sets)?;
            let start = Instant::now();
            let report = if parallel { run_scenario_parallel(&scenario)? } else { run_scenario(&scenario)? };
            let dir = write_outputs(&report, &out, start.elapsed().as_millis())?;
            for c in &report.checks {
                println!("{:<28} {:<20} {}", c.name, c.op, if c.passed { "pass" } else { "FAIL" });
            }
            println!("{}: {} ({})", report.scenario, if report.verdict { "pass" } else { "FAIL" }, dir.display());
            Ok(report.verdict)
        }
        Command::List => {
            for s in registry::builtin() {
                println!("{:<32} {}", s.name, s.reproduces);
            }
            Ok(true)
        }
        Command::CheckCapacity { file } => {
            let mu = read_spec(&file)?.parse::<Rational>()?.to_capacity();
            let flags = classify_capacity(&mu);
            println!("{}", serde_json::to_string_pretty(&flags)?);
            Ok(true)
        }
        Command::Core { file, limit } => {
            let mu = read_spec(&file)?.parse::<Rational>()?.to_capacity();
            let core = core_vertices(&mu, limit)?;
            let out = json!({"empty": core.is_empty(), "vertices": core.vertices});
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(true)
        }
        Command::Lyapunov { scenario, sets } => {
            let s = apply_overrides(&load_scenario(&scenario)?, &sets)?;
            let SystemSpec::Cocycle { base, generator, omega } = &s.system else {
                bail!("scenario {} is not a cocycle scenario", s.name);
            };
            let (n, period) = s
                .checks
                .iter()
                .find_map(|c| match c.kind {
                    CheckKind::Lyapunov { n, renorm_period, .. } => Some((n, renorm_period)),
                    CheckKind::Oseledets { n, .. } => Some((n, 1)),
                    _ => None,
                })
                .unwrap_or((10_000, 1));
            let gen = generator.build()?;
            let spectrum = match base {
                capergo::scenario::BaseSpec::Finite { map } => {
                    let w = omega.as_u64().context("finite base needs an integer omega")? as usize;
                    if w >= map.n() {
                        bail!("omega {w} outside the base");
                    }
                    lyapunov_qr(&gen, map, &w, n, period)?
                }
                capergo::scenario::BaseSpec::Interval { map } => {
                    let map: PiecewiseAffineMap<f64> = map.build()?;
                    let w: f64 = scalar_from_json(omega)?;
                    lyapunov_qr(&gen, &map, &w, n, period)?
                }
            };
            print!("{}", spectrum.to_csv());
            Ok(true)
        }
    }
}
