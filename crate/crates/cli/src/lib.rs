//! Command-line driver: runs the core experiments and writes a JSON summary
//! with named checks plus CSV tables.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

pub mod bessel;
pub mod conjugate;
pub mod hedge;
pub mod report;
pub mod sweep;
pub mod tree_duality;

pub use report::{Check, Comparison, Summary};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("io: {0}")]
    Io(String),
    #[error("input: {0}")]
    Parse(String),
    #[error("computation: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) | CliError::Parse(_) => 2,
            CliError::Numeric(_) => 1,
        }
    }

    pub(crate) fn numeric(e: impl std::fmt::Display) -> Self {
        CliError::Numeric(e.to_string())
    }

    pub(crate) fn parse(e: impl std::fmt::Display) -> Self {
        CliError::Parse(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "cdlab", version, about = "Consumption-investment duality experiments")]
pub struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "CDLAB_OUT_DIR", default_value = "cdlab-out")]
    pub out: PathBuf,
    /// Seed for Monte Carlo commands (overrides config files).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override a check threshold, e.g. `--tol conjugacy_gap=1e-9`.
    #[arg(long = "tol", global = true, value_name = "NAME=VALUE", value_parser = report::parse_tolerance)]
    pub tolerances: Vec<(String, f64)>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Primal and dual solutions on an event tree.
    TreeDuality(tree_duality::TreeDualityArgs),
    /// Smallest dominating process, hedge and admissibility on a tree.
    Superhedge(hedge::SuperhedgeArgs),
    /// Monte Carlo study of the Bessel market.
    Bessel(bessel::BesselArgs),
    /// Conjugate table of a utility over a y-grid.
    Conjugate(conjugate::ConjugateArgs),
    /// Re-run a base config across values of one parameter.
    Sweep(sweep::SweepArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TreeDuality(_) => "tree-duality",
            Command::Superhedge(_) => "superhedge",
            Command::Bessel(_) => "bessel",
            Command::Conjugate(_) => "conjugate",
            Command::Sweep(_) => "sweep",
        }
    }
}

/// Shared run settings.
#[derive(Debug, Clone)]
pub struct Context {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub tolerances: Vec<(String, f64)>,
}

/// Result of one command: its summary and a flat row for sweep tables.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: Summary,
    pub row: Vec<(String, String)>,
}

pub fn run_command(command: &Command, ctx: &Context) -> Result<RunOutput, CliError> {
    report::ensure_dir(&ctx.out)?;
    let output = match command {
        Command::TreeDuality(a) => tree_duality::run(a, ctx)?,
        Command::Superhedge(a) => hedge::run(a, ctx)?,
        Command::Bessel(a) => bessel::run(a, ctx)?,
        Command::Conjugate(a) => conjugate::run(a, ctx)?,
        Command::Sweep(a) => sweep::run(a, ctx)?,
    };
    report::write_json(&ctx.out, "summary.json", &output.summary)?;
    report::write_metadata(&ctx.out, command.name())?;
    Ok(output)
}

/// Runs a command and always tries to leave a summary behind; returns the
/// exit code.
pub fn execute(command: &Command, ctx: &Context) -> (i32, Summary) {
    match run_command(command, ctx) {
        Ok(out) => (out.summary.exit_code, out.summary),
        Err(e) => {
            let summary = Summary::from_error(command.name(), ctx.seed, &e);
            if report::ensure_dir(&ctx.out).is_ok() {
                let _ = report::write_json(&ctx.out, "summary.json", &summary);
                let _ = report::write_metadata(&ctx.out, command.name());
            }
            (e.exit_code(), summary)
        }
    }
}

pub fn main_with(cli: Cli) -> i32 {
    let ctx = Context {
        out: cli.out,
        seed: cli.seed,
        tolerances: cli.tolerances,
    };
    let (code, summary) = execute(&cli.command, &ctx);
    let status = &summary.status;
    eprintln!("{}: {status} ({})", summary.command, ctx.out.display());
    for f in &summary.failures {
        eprintln!("  failed: {f}");
    }
    code
}

/// Resolves a relative input path against `base` (a config directory).
pub(crate) fn resolve(base: Option<&Path>, path: &Path) -> PathBuf {
    match base {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
