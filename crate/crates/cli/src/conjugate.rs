use std::path::{Path, PathBuf};

use cdlab_core::utility::log_grid;
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::report::{self, num, Summary, Table, Tolerances};
use crate::tree_duality::{build_utility, UtilityChoice};
use crate::{resolve, CliError, Context, RunOutput};

pub const TOLERANCES: &[(&str, f64)] = &[("fenchel_gap_at_optimum", 1e-10), ("fenchel_gap_negative", 1e-12)];

fn default_grid() -> String {
    "0.001:1000:61".to_string()
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConjugateArgs {
    #[arg(long, value_enum, default_value_t = UtilityChoice::Log)]
    #[serde(default)]
    pub utility: UtilityChoice,
    #[arg(long, allow_hyphen_values = true)]
    #[serde(default)]
    pub p: Option<f64>,
    #[arg(long)]
    #[serde(default)]
    pub table: Option<PathBuf>,
    /// Log-spaced y-grid `LO:HI:N`.
    #[arg(long, default_value = "0.001:1000:61")]
    #[serde(default = "default_grid")]
    pub grid: String,
}

impl ConjugateArgs {
    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(t) = &self.table {
            self.table = Some(resolve(Some(base), t));
        }
    }
}

pub fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Parse(format!("grid {spec:?}: expected LO:HI:N with 0 < LO < HI and N >= 2"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if !(lo > 0.0 && hi > lo && hi.is_finite() && n >= 2) {
        return Err(bad());
    }
    Ok(log_grid(lo, hi, n))
}

pub fn run(args: &ConjugateArgs, ctx: &Context) -> Result<RunOutput, CliError> {
    let tol = Tolerances::new(TOLERANCES, &ctx.tolerances)?;
    let spec = build_utility(args.utility, args.p, args.table.as_deref())?;
    let grid = parse_grid(&args.grid)?;
    let mut table = Table::new(&["y", "v", "v_prime", "inverse_marginal", "fenchel_gap_at_inverse"]);
    let mut worst_at_optimum = 0.0f64;
    let mut most_negative = 0.0f64;
    for &y in &grid {
        let v = spec.conjugate(y).map_err(CliError::numeric)?;
        let dv = spec.conjugate_derivative(y).map_err(CliError::numeric)?;
        let i = spec.inverse_marginal(y).map_err(CliError::numeric)?;
        let gap = spec.fenchel_gap(i, y).map_err(CliError::numeric)?;
        worst_at_optimum = worst_at_optimum.max(gap.abs());
        most_negative = most_negative.max(-gap);
        table.push(vec![num(y), num(v), num(dv), num(i), num(gap)]);
    }
    report::write_csv(&ctx.out, "conjugate.csv", &table)?;
    let checks = vec![
        tol.at_most("fenchel_gap_at_optimum", worst_at_optimum),
        tol.at_most("fenchel_gap_negative", most_negative),
    ];
    let inputs = serde_json::to_value(args).map_err(CliError::parse)?;
    let results = json!({ "points": grid.len() });
    let row = vec![("fenchel_gap_at_optimum".into(), num(worst_at_optimum))];
    Ok(RunOutput {
        summary: Summary::from_checks("conjugate", ctx.seed, inputs, checks, results),
        row,
    })
}
