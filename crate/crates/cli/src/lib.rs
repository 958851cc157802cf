//! Command-line driver: configuration files, subcommands and run reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, Setup};
use crate::error::{CliError, EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_OK};
use crate::report::{pretty_json, write_run};

/// Output directory when neither `--out` nor the config names one.
pub const DEFAULT_OUT: &str = "gbdsde-out";

#[derive(Debug, Parser)]
#[command(name = "gbdsde", version, about = "Simulations, solvers and checks for G-Brownian stochastic PDEs and BDSDEs")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Experiment config (JSON); the shipped default when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// G-Brownian paths and backward-integral diagnostics.
    SimulateGbm(RunArgs),
    /// Diffusion paths and the bracket check.
    SimulateHunt(RunArgs),
    /// Picard solve of the stochastic PDE.
    SolveGspde(RunArgs),
    /// Regression Picard solve of the backward doubly stochastic equation.
    SolveGbdsde(RunArgs),
    /// PDE against BDSDE along shared paths.
    VerifyRepresentation(RunArgs),
    /// Ordered data give ordered solutions.
    VerifyComparison(RunArgs),
    /// Linear transport identity along shared paths.
    VerifyTransport(RunArgs),
    /// Every command above into one run directory.
    RunSuite(RunArgs),
    /// Print contraction margins and proof constants.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Concatenate the summaries of run directories.
    ReportMerge {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn run_args(&self) -> Option<(&'static str, &RunArgs)> {
        Some(match self {
            Command::SimulateGbm(a) => ("simulate-gbm", a),
            Command::SimulateHunt(a) => ("simulate-hunt", a),
            Command::SolveGspde(a) => ("solve-gspde", a),
            Command::SolveGbdsde(a) => ("solve-gbdsde", a),
            Command::VerifyRepresentation(a) => ("verify-representation", a),
            Command::VerifyComparison(a) => ("verify-comparison", a),
            Command::VerifyTransport(a) => ("verify-transport", a),
            Command::RunSuite(a) => ("run-suite", a),
            _ => return None,
        })
    }
}

/// Loads, applies the seed override and validates.
pub fn setup(config: Option<&Path>, seed: Option<u64>) -> Result<Setup, CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Setup::new(cfg)
}

/// Runs one subcommand into `out` and returns the exit code.
pub fn execute(name: &str, s: &Setup, out: &Path) -> Result<i32, CliError> {
    let outcome = commands::run_command(name, s)?;
    let report = write_run(out, &outcome, &pretty_json(&s.config), &s.hash, s.config.seed)?;
    for c in report.checks.iter().filter(|c| !c.pass) {
        println!(
            "FAIL {} scenario={} {} value={:?} tolerance={:?}",
            c.check,
            c.scenario_id.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
            c.metric,
            c.value,
            c.tolerance
        );
    }
    let failed = report.checks.iter().filter(|c| !c.pass).count();
    println!(
        "{name}: {} checks, {failed} failed; report in {}",
        report.checks.len(),
        out.join(report::REPORT_FILE).display()
    );
    Ok(if failed == 0 { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Some((name, a)) = cli.command.run_args() {
        let s = setup(a.config.as_deref(), a.seed)?;
        let out = a
            .out
            .clone()
            .or_else(|| s.config.output.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        return execute(name, &s, &out);
    }
    match cli.command {
        Command::Validate { config, seed } => {
            let s = setup(config.as_deref(), seed)?;
            print!("{}", pretty_json(&commands::validation(&s)?));
            Ok(EXIT_OK)
        }
        Command::ReportMerge { dirs, out } => {
            let refs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
            let csv = report::merge(&refs)?;
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
                None => print!("{csv}"),
            }
            Ok(EXIT_OK)
        }
        _ => unreachable!("run commands handled above"),
    }
}

/// Parses `args` (program name first) and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
