use std::path::PathBuf;

use cdlab_core::bessel::{
    budget_saturation, expectation_deficit, martingale_increment_test, moment_table, pathwise_invariant_check,
    potential_decay, power_dual_scan, simulate, IncrementOptions, MeanEstimate, PathBatch, Process, SdeConfig,
};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::report::{self, num, Check, Comparison, Summary, Table, Tolerances};
use crate::{CliError, Context, RunOutput};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BesselArgs {
    /// TOML file with `[sde]` and optional `[report]` sections.
    #[arg(long)]
    pub config: PathBuf,
}

fn default_psi_grid() -> Vec<f64> {
    vec![-0.5, -0.25, 0.0, 0.25, 0.5]
}
fn default_level() -> f64 {
    0.99
}
fn default_mhat_tolerance() -> f64 {
    1e-7
}
fn default_increment_z() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportOptions {
    /// Times for the potential table (default: every recorded time).
    #[serde(default)]
    pub potential_times: Option<Vec<f64>>,
    /// Right ends of the increment tests (default: the horizon).
    #[serde(default)]
    pub increment_times: Option<Vec<f64>>,
    /// Times where `E[Z0_t] < 1` is certified (default: the horizon).
    #[serde(default)]
    pub deficit_times: Option<Vec<f64>>,
    #[serde(default = "default_psi_grid")]
    pub psi_grid: Vec<f64>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_mhat_tolerance")]
    pub mhat_tolerance: f64,
    #[serde(default = "default_increment_z")]
    pub increment_z: f64,
    #[serde(default)]
    pub increment_bins: Option<usize>,
    #[serde(default)]
    pub increment_resolution: Option<f64>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        toml::from_str("").expect("all report fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BesselFile {
    pub sde: SdeConfig,
    #[serde(default)]
    pub report: ReportOptions,
}

pub fn load(path: &std::path::Path) -> Result<BesselFile, CliError> {
    let text = crate::read_text(path)?;
    toml::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

pub fn run(args: &BesselArgs, ctx: &Context) -> Result<RunOutput, CliError> {
    run_file(&load(&args.config)?, ctx)
}

fn estimate_row(label: &str, power: i32, t: f64, e: &MeanEstimate, target: Option<f64>) -> Vec<String> {
    vec![
        label.to_string(),
        power.to_string(),
        num(t),
        num(e.mean),
        num(e.std_err),
        num(e.ci_lo),
        num(e.ci_hi),
        target.map(num).unwrap_or_default(),
    ]
}

fn moments(batch: &PathBatch, level: f64) -> Result<Table, CliError> {
    let mut table = Table::new(&["process", "power", "t", "mean", "std_err", "ci_lo", "ci_hi", "target"]);
    for (process, label, power) in [(Process::B, "b", 2), (Process::Z0, "z0", 1), (Process::Z0, "z0", 2)] {
        for row in moment_table(batch, process, power, level).map_err(CliError::numeric)? {
            let target = (label == "b").then_some(1.0 + 3.0 * row.t);
            table.push(estimate_row(label, power, row.t, &row.estimate, target));
        }
    }
    Ok(table)
}

pub fn run_file(file: &BesselFile, ctx: &Context) -> Result<RunOutput, CliError> {
    let mut config = file.sde.clone();
    if let Some(seed) = ctx.seed {
        config.seed = seed;
    }
    config.validate().map_err(CliError::parse)?;
    let opts = &file.report;
    let tol = Tolerances::new(
        &[
            ("consumption_identity", 1e-12),
            ("deflated_wealth_identity", 1e-12),
            ("potential_error", 1e-12),
            ("mhat_tolerance", opts.mhat_tolerance),
            ("increment_z", opts.increment_z),
        ],
        &ctx.tolerances,
    )?;
    let batch = simulate(&config).map_err(CliError::numeric)?;
    let level = opts.level;
    let horizon = *batch.times.last().expect("at least one time");
    let mut checks = Vec::new();
    let mut results = json!({ "scheme": batch.scheme, "n_times": batch.n_times() });

    report::write_csv(&ctx.out, "moments.csv", &moments(&batch, level)?)?;

    let mut deficit_rows = Vec::new();
    for &t in opts.deficit_times.as_deref().unwrap_or(&[horizon]) {
        let d = expectation_deficit(&batch, t, level).map_err(CliError::numeric)?;
        checks.push(Check::new(
            format!("z0_expectation_below_one_t={}", num(d.t)),
            d.estimate.ci_hi,
            Comparison::Below,
            1.0,
        ));
        deficit_rows.push(d);
    }
    let z0_end = deficit_rows
        .last()
        .ok_or_else(|| CliError::Parse("deficit_times is empty".into()))?
        .estimate
        .clone();
    results["deficits"] = json!(deficit_rows);

    let mut row = vec![
        ("alpha".to_string(), num(config.alpha)),
        ("x".into(), num(config.x)),
        ("p".into(), num(config.p)),
        ("dt".into(), num(config.dt)),
        ("n_paths".into(), config.n_paths.to_string()),
        ("seed".into(), config.seed.to_string()),
        ("z0_mean".into(), num(z0_end.mean)),
        ("z0_ci_hi".into(), num(z0_end.ci_hi)),
    ];

    if config.p == 0.0 {
        let r = pathwise_invariant_check(&config, &batch).map_err(CliError::numeric)?;
        let spacing = batch.times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        checks.push(tol.at_most("consumption_identity", r.consumption));
        checks.push(tol.at_most("deflated_wealth_identity", r.deflated_wealth));
        checks.push(Check::new(
            "mhat_quadrature_bound",
            r.m_hat,
            Comparison::AtMost,
            config.alpha * config.x * spacing,
        ));
        checks.push(tol.at_most("mhat_tolerance", r.m_hat));

        let times = opts.potential_times.clone().unwrap_or_else(|| batch.times.clone());
        let pot = potential_decay(&config, &batch, &times).map_err(CliError::numeric)?;
        let worst = pot.iter().map(|p| p.abs_error).fold(0.0, f64::max);
        checks.push(tol.at_most("potential_error", worst));
        if pot.len() > 1 {
            let steepest = pot.windows(2).map(|w| w[1].mean - w[0].mean).fold(f64::NEG_INFINITY, f64::max);
            checks.push(Check::new("potential_decreasing", steepest, Comparison::Below, 0.0));
        }
        let mut table = Table::new(&["t", "mean", "target", "abs_error"]);
        for p in &pot {
            table.push(vec![num(p.t), num(p.mean), num(p.target), num(p.abs_error)]);
        }
        report::write_csv(&ctx.out, "potential.csv", &table)?;

        let budget = budget_saturation(&config, &batch).map_err(CliError::numeric)?;
        checks.push(Check::new(
            "budget_saturation",
            (budget.total - config.x).abs(),
            Comparison::AtMost,
            tol.get("mhat_tolerance"),
        ));

        let mut inc_opts = IncrementOptions::default();
        if let Some(b) = opts.increment_bins {
            inc_opts.bins = b;
        }
        if let Some(r) = opts.increment_resolution {
            inc_opts.resolution = r;
        }
        let inc_times = opts.increment_times.clone().unwrap_or_else(|| vec![horizon]);
        let incs = martingale_increment_test(&batch, Process::MHat, &inc_times, inc_opts)
            .map_err(CliError::numeric)?;
        let worst_z = incs.iter().map(|r| r.max_abs_z).fold(0.0, f64::max);
        checks.push(tol.at_most("increment_z", worst_z));
        let mut table = Table::new(&["process", "t_from", "t_to", "mean", "z", "max_abs_z", "bin_z"]);
        for r in &incs {
            let bins: Vec<String> = r.bin_z.iter().map(|v| num(*v)).collect();
            table.push(vec![
                "m_hat".into(),
                num(r.t_from),
                num(r.t_to),
                num(r.mean),
                num(r.z),
                num(r.max_abs_z),
                bins.join(";"),
            ]);
        }
        report::write_csv(&ctx.out, "increments.csv", &table)?;

        results["pathwise_residuals"] = json!(r);
        results["budget_saturation"] = json!(budget);
        let last = pot
            .last()
            .ok_or_else(|| CliError::Parse("potential_times is empty".into()))?;
        row.push(("mhat_residual".into(), num(r.m_hat)));
        row.push(("potential_t".into(), num(last.t)));
        row.push(("potential_mean".into(), num(last.mean)));
        row.push(("potential_target".into(), num(last.target)));
    } else {
        let scan = power_dual_scan(&config, &opts.psi_grid, level).map_err(CliError::numeric)?;
        let lowest = scan
            .rows
            .iter()
            .map(|r| r.excess_over_zero.ci_hi)
            .fold(f64::INFINITY, f64::min);
        checks.push(Check::new("dual_minimized_at_zero_psi", lowest, Comparison::AtLeast, 0.0));
        let mut table = Table::new(&[
            "psi",
            "mean",
            "ci_lo",
            "ci_hi",
            "excess_mean",
            "excess_ci_lo",
            "excess_ci_hi",
        ]);
        for r in &scan.rows {
            table.push(vec![
                num(r.psi),
                num(r.estimate.mean),
                num(r.estimate.ci_lo),
                num(r.estimate.ci_hi),
                num(r.excess_over_zero.mean),
                num(r.excess_over_zero.ci_lo),
                num(r.excess_over_zero.ci_hi),
            ]);
        }
        report::write_csv(&ctx.out, "dual_scan.csv", &table)?;
        results["dual_y"] = json!(scan.y);
        results["argmin_psi"] = json!(scan.argmin_psi);
        row.push(("argmin_psi".into(), num(scan.argmin_psi)));
    }

    let inputs = json!({ "sde": config, "report": opts });
    Ok(RunOutput {
        summary: Summary::from_checks("bessel", Some(config.seed), inputs, checks, results),
        row,
    })
}
