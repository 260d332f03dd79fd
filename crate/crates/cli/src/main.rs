//! `grassq`: configuration-driven experiments over the grassq library.
//!
//! Exit codes: 0 pass, 1 check failure, 2 configuration error, 3 convergence error.

mod config;
mod experiments;
mod output;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use grassq::Error;
use serde_json::json;

use config::{Experiment, ExperimentConfig, OUTPUT_DIR_VAR};
use output::Sink;

#[derive(Parser, Debug)]
#[command(
    name = "grassq",
    version,
    about = "Grassmann stochastic quantisation experiments"
)]
struct Cli {
    /// TOML configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, overriding the configuration and the environment.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for randomised property checks.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for independent sub-runs.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Run the invariant suite of every module.
    Verify,
    /// Integrate the truncated flow and tabulate norms and the chemical potential.
    Flow,
    /// Check the quantisation identity along three routes.
    Quantise,
    /// Two-point decay and masked-noise coupling.
    Decay,
    /// Scaling and decay estimates of the covariance kernels.
    Kernels,
    /// Deviation between lattice spacings.
    Refine,
}

impl From<Command> for Experiment {
    fn from(c: Command) -> Self {
        match c {
            Command::Verify => Experiment::Verify,
            Command::Flow => Experiment::Flow,
            Command::Quantise => Experiment::Quantise,
            Command::Decay => Experiment::Decay,
            Command::Kernels => Experiment::Kernels,
            Command::Refine => Experiment::Refine,
        }
    }
}

const EXIT_CHECK: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CONVERGENCE: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Configuration(_) | Error::Usage(_) | Error::Capacity(_) => EXIT_CONFIG,
        Error::Convergence(_) => EXIT_CONVERGENCE,
        _ => EXIT_CHECK,
    }
}

fn name(e: Experiment) -> &'static str {
    match e {
        Experiment::Verify => "verify",
        Experiment::Flow => "flow",
        Experiment::Quantise => "quantise",
        Experiment::Decay => "decay",
        Experiment::Kernels => "kernels",
        Experiment::Refine => "refine",
    }
}

fn resolve(cli: &Cli) -> grassq::Result<(ExperimentConfig, Experiment)> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_VAR) {
        cfg.output_dir = dir.into();
    }
    if let Some(dir) = &cli.out {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.threads == 0 {
        return Err(Error::Configuration("--threads must be at least 1".into()));
    }
    let experiment = cli
        .command
        .map(Experiment::from)
        .or(cfg.experiment.run)
        .ok_or_else(|| {
            Error::Configuration(
                "no experiment given on the command line or in the configuration".into(),
            )
        })?;
    cfg.validate()?;
    Ok((cfg, experiment))
}

/// Returns whether every check passed.
fn run(cfg: &ExperimentConfig, experiment: Experiment, threads: usize) -> grassq::Result<bool> {
    let mut sink = Sink::create(&cfg.output_dir)?;
    let resolved = toml::to_string(cfg).map_err(|e| Error::Internal(e.to_string()))?;
    sink.bytes("config.toml", resolved.as_bytes())?;
    if experiment == Experiment::Verify {
        let report = verify::run(cfg)?;
        for inv in &report.invariants {
            let tag = if inv.pass { "PASS" } else { "FAIL" };
            println!("{tag} {}: {} ({:e})", inv.module, inv.name, inv.measured);
        }
        sink.json("verify.json", &report)?;
        return Ok(report.passed);
    }
    let outcome = match experiment {
        Experiment::Flow => experiments::flow(cfg, &mut sink)?,
        Experiment::Quantise => experiments::quantise(cfg, &mut sink, threads)?,
        Experiment::Decay => experiments::decay(cfg, &mut sink)?,
        Experiment::Kernels => experiments::kernels(cfg, &mut sink)?,
        Experiment::Refine => experiments::refine(cfg, &mut sink, threads)?,
        Experiment::Verify => unreachable!("handled above"),
    };
    let passed = outcome.checks.iter().all(|c| c.pass);
    for c in &outcome.checks {
        println!(
            "{} {} ({:e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value
        );
    }
    let summary = json!({
        "experiment": name(experiment),
        "passed": passed,
        "checks": outcome.checks,
        "results": outcome.summary,
    });
    sink.json(&format!("{}_summary.json", name(experiment)), &summary)?;
    for path in sink.written() {
        println!("wrote {}", path.display());
    }
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cfg, experiment) = match resolve(&cli) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("grassq: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    match run(&cfg, experiment, cli.threads) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK),
        Err(e) => {
            eprintln!("grassq: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
