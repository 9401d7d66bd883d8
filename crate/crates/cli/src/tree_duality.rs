use std::path::{Path, PathBuf};

use cdlab_core::duality::{duality_report, strategy_from_wealth};
use cdlab_core::tree::Clock;
use cdlab_core::utility::TabulatedUtility;
use cdlab_core::{EventTree, UtilitySpec};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::report::{self, num, Check, Comparison, Summary, Table, Tolerances};
use crate::{resolve, CliError, Context, RunOutput};

pub const TOLERANCES: &[(&str, f64)] = &[
    ("conjugacy_gap", 1e-8),
    ("primal_dual_gap", 1e-7),
    ("pdc_residual", 1e-9),
    ("budget_residual", 1e-10),
    ("martingale_residual", 1e-10),
    ("terminal_deflated_wealth", 1e-10),
    ("derivative_identity", 1e-5),
    ("dual_stationarity", 1e-9),
    ("hedge_residual", 1e-9),
    ("plan_difference", 1e-5),
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityChoice {
    #[default]
    Log,
    Power,
    Tabulated,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeDualityArgs {
    /// Tree JSON file.
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long, value_enum, default_value_t = UtilityChoice::Log)]
    #[serde(default)]
    pub utility: UtilityChoice,
    /// CRRA exponent for `--utility power`.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(default)]
    pub p: Option<f64>,
    /// Table file for `--utility tabulated`.
    #[arg(long)]
    #[serde(default)]
    pub table: Option<PathBuf>,
    /// Initial capital.
    #[arg(long, default_value_t = 1.0)]
    #[serde(default = "one")]
    pub x: f64,
    /// Discount rate; replaces the tree's clock (same dt).
    #[arg(long)]
    #[serde(default)]
    pub alpha: Option<f64>,
}

impl TreeDualityArgs {
    pub fn resolve_paths(&mut self, base: &Path) {
        self.tree = resolve(Some(base), &self.tree);
        if let Some(t) = &self.table {
            self.table = Some(resolve(Some(base), t));
        }
    }
}

pub(crate) fn build_utility(
    choice: UtilityChoice,
    p: Option<f64>,
    table: Option<&Path>,
) -> Result<UtilitySpec, CliError> {
    match choice {
        UtilityChoice::Log => Ok(UtilitySpec::log()),
        UtilityChoice::Power => {
            let p = p.ok_or_else(|| CliError::Parse("--utility power needs --p".into()))?;
            UtilitySpec::crra(p).map_err(CliError::parse)
        }
        UtilityChoice::Tabulated => {
            let path = table.ok_or_else(|| CliError::Parse("--utility tabulated needs --table".into()))?;
            let text = crate::read_text(path)?;
            Ok(UtilitySpec::tabulated(TabulatedUtility::parse(&text).map_err(CliError::parse)?))
        }
    }
}

pub(crate) fn load_tree(path: &Path, alpha: Option<f64>) -> Result<EventTree, CliError> {
    let text = crate::read_text(path)?;
    let tree = EventTree::from_json(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    match alpha {
        None => Ok(tree),
        Some(a) => {
            let clock = Clock::geometric(a, tree.dt(), tree.horizon()).map_err(CliError::parse)?;
            tree.with_clock(clock).map_err(CliError::parse)
        }
    }
}

pub fn run(args: &TreeDualityArgs, ctx: &Context) -> Result<RunOutput, CliError> {
    let tol = Tolerances::new(TOLERANCES, &ctx.tolerances)?;
    let tree = load_tree(&args.tree, args.alpha)?;
    let spec = build_utility(args.utility, args.p, args.table.as_deref())?;
    if !(args.x > 0.0 && args.x.is_finite()) {
        return Err(CliError::Parse(format!("--x must be positive, got {}", args.x)));
    }
    let r = duality_report(&tree, &spec, args.x).map_err(CliError::numeric)?;

    let mut checks = vec![
        tol.at_most("conjugacy_gap", r.conjugacy_gap.abs()),
        tol.at_most("pdc_residual", r.pdc_max_residual),
        tol.at_most("budget_residual", r.budget_residual),
        tol.at_most("martingale_residual", r.martingale_max_residual),
        tol.at_most("terminal_deflated_wealth", r.terminal_deflated_wealth_max),
    ];
    let steepest = r
        .deflated_wealth
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(Check::new("potential_decreasing", steepest, Comparison::Below, 0.0));
    let d = &r.derivative_identity_residuals;
    checks.push(Check::new(
        "derivative_identity_primal",
        d.primal,
        Comparison::AtMost,
        tol.get("derivative_identity"),
    ));
    checks.push(Check::new(
        "derivative_identity_dual",
        d.dual,
        Comparison::AtMost,
        tol.get("derivative_identity"),
    ));
    checks.push(tol.at_most("dual_stationarity", r.dual_stationarity));
    checks.push(tol.at_most("hedge_residual", r.hedge_residual));
    if let Some(diff) = r.plan_max_difference {
        checks.push(tol.at_most("plan_difference", diff));
        checks.push(tol.at_most(
            "primal_dual_gap",
            (r.u_of_x - r.v_of_y - args.x * r.y_star).abs(),
        ));
    }

    let (strategy, _) = strategy_from_wealth(&tree, &r.wealth, &r.plan);
    let d_assets = tree.n_assets();
    let mut header: Vec<String> = ["node", "t", "parent", "prob", "path_prob"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..d_assets).map(|k| format!("price_{k}")));
    header.extend(["deflator", "consumption", "wealth"].iter().map(|s| s.to_string()));
    header.extend((0..d_assets).map(|k| format!("holding_{k}")));
    let mut nodes = Table { header, rows: Vec::new() };
    for (n, node) in tree.nodes().iter().enumerate() {
        let mut row = vec![
            n.to_string(),
            node.t.to_string(),
            node.parent.map(|p| p.to_string()).unwrap_or_default(),
            num(node.prob),
            num(node.path_prob),
        ];
        row.extend(node.prices.iter().map(|v| num(*v)));
        row.extend([num(r.deflator.values[n]), num(r.plan.rates[n]), num(r.wealth[n])]);
        let h = &strategy.holdings[n];
        row.extend((0..d_assets).map(|k| h.get(k).map(|v| num(*v)).unwrap_or_default()));
        nodes.push(row);
    }
    report::write_csv(&ctx.out, "nodes.csv", &nodes)?;

    let mut potential = Table::new(&["index", "label", "deflated_wealth"]);
    for (i, v) in r.deflated_wealth.iter().enumerate() {
        let label = if i <= tree.horizon() {
            format!("t={i}")
        } else {
            "terminal_post_consumption".to_string()
        };
        potential.push(vec![i.to_string(), label, num(*v)]);
    }
    report::write_csv(&ctx.out, "potential.csv", &potential)?;

    let results = json!({
        "x": r.x,
        "y_star": r.y_star,
        "u_of_x": r.u_of_x,
        "u_source": r.u_source,
        "v_of_y": r.v_of_y,
        "conjugacy_gap": r.conjugacy_gap,
        "deflated_wealth": r.deflated_wealth,
        "derivative_identity_residuals": r.derivative_identity_residuals,
        "dual_iterations": r.dual_iterations,
        "clock_tail_mass": r.clock_tail_mass,
    });
    let row = vec![
        ("x".into(), num(r.x)),
        ("y_star".into(), num(r.y_star)),
        ("u_of_x".into(), num(r.u_of_x)),
        ("u_source".into(), format!("{:?}", r.u_source).to_lowercase()),
        ("v_of_y".into(), num(r.v_of_y)),
        ("conjugacy_gap".into(), num(r.conjugacy_gap)),
        ("pdc_residual".into(), num(r.pdc_max_residual)),
        ("budget_residual".into(), num(r.budget_residual)),
        ("martingale_residual".into(), num(r.martingale_max_residual)),
    ];
    let inputs = serde_json::to_value(args).map_err(CliError::parse)?;
    Ok(RunOutput {
        summary: Summary::from_checks("tree-duality", ctx.seed, inputs, checks, results),
        row,
    })
}
