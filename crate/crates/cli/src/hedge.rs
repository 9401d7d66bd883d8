use std::path::{Path, PathBuf};

use cdlab_core::superhedge::{
    admissibility_via_budget, cumulative_consumption, decomposition_residual, superhedge, Claim, SuperhedgeResult,
};
use cdlab_core::{ConsumptionPlan, EventTree};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::report::{self, num, Check, Summary, Table, Tolerances};
use crate::tree_duality::load_tree;
use crate::{resolve, CliError, Context, RunOutput};

pub const TOLERANCES: &[(&str, f64)] = &[
    ("domination", 1e-12),
    ("decomposition_residual", 1e-10),
    ("increasing_process", 1e-10),
    ("admissible_wealth", 1e-12),
    ("capital_excess", 1e-12),
];

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperhedgeArgs {
    /// Tree JSON file.
    #[arg(long)]
    pub tree: PathBuf,
    /// `put:K`, `call:K`, `american-put:K`, `american-call:K` (optional
    /// `@asset`), `nodes:FILE` (target per node) or `consumption:FILE`
    /// (rate per node, checked for admissibility at `--capital`).
    #[arg(long)]
    pub claim: String,
    /// Initial capital for consumption plans.
    #[arg(long, default_value_t = 1.0)]
    #[serde(default = "one")]
    pub capital: f64,
}

impl SuperhedgeArgs {
    pub fn resolve_paths(&mut self, base: &Path) {
        self.tree = resolve(Some(base), &self.tree);
        for prefix in ["nodes:", "consumption:"] {
            if let Some(file) = self.claim.strip_prefix(prefix) {
                self.claim = format!("{prefix}{}", resolve(Some(base), Path::new(file)).display());
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NodeValues {
    Bare(Vec<f64>),
    Rates { rates: Vec<f64> },
    Values { values: Vec<f64> },
}

fn read_node_values(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = crate::read_text(path)?;
    let v: NodeValues =
        serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    Ok(match v {
        NodeValues::Bare(v) | NodeValues::Rates { rates: v } | NodeValues::Values { values: v } => v,
    })
}

enum Target {
    Claim(Claim),
    Nodes(Vec<f64>),
    Consumption(ConsumptionPlan),
}

fn parse_target(spec: &str) -> Result<Target, CliError> {
    if let Some(file) = spec.strip_prefix("nodes:") {
        return Ok(Target::Nodes(read_node_values(Path::new(file))?));
    }
    if let Some(file) = spec.strip_prefix("consumption:") {
        return Ok(Target::Consumption(ConsumptionPlan {
            rates: read_node_values(Path::new(file))?,
        }));
    }
    spec.parse().map(Target::Claim).map_err(CliError::parse)
}

fn structural_checks(tree: &EventTree, b: &[f64], r: &SuperhedgeResult, tol: &Tolerances) -> Vec<Check> {
    let shortfall = b.iter().zip(&r.w).map(|(b, w)| b - w).fold(0.0, f64::max);
    let decrease = tree
        .nodes()
        .iter()
        .enumerate()
        .flat_map(|(n, node)| node.children.iter().map(move |&c| (n, c)))
        .map(|(n, c)| r.a[n] - r.a[c])
        .fold(0.0, f64::max);
    vec![
        tol.at_most("domination", shortfall),
        tol.at_most("decomposition_residual", decomposition_residual(tree, r)),
        tol.at_most("increasing_process", decrease),
    ]
}

fn node_table(tree: &EventTree, b: &[f64], r: &SuperhedgeResult) -> Table {
    let d = tree.n_assets();
    let mut header: Vec<String> = vec!["node".into(), "t".into()];
    header.extend((0..d).map(|k| format!("price_{k}")));
    header.extend(["target", "w", "a", "stop"].iter().map(|s| s.to_string()));
    header.extend((0..d).map(|k| format!("phi_{k}")));
    let mut table = Table { header, rows: Vec::new() };
    for (n, node) in tree.nodes().iter().enumerate() {
        let mut row = vec![n.to_string(), node.t.to_string()];
        row.extend(node.prices.iter().map(|v| num(*v)));
        row.extend([num(b[n]), num(r.w[n]), num(r.a[n]), r.stop[n].to_string()]);
        row.extend((0..d).map(|k| r.phi[n].get(k).map(|v| num(*v)).unwrap_or_default()));
        table.push(row);
    }
    table
}

pub fn run(args: &SuperhedgeArgs, ctx: &Context) -> Result<RunOutput, CliError> {
    let tol = Tolerances::new(TOLERANCES, &ctx.tolerances)?;
    let tree = load_tree(&args.tree, None)?;
    let target = parse_target(&args.claim)?;
    let inputs = serde_json::to_value(args).map_err(CliError::parse)?;

    let (b, result, mut checks, mut results) = match target {
        Target::Claim(claim) => {
            let b = claim.target(&tree).map_err(CliError::parse)?;
            let r = superhedge(&tree, &b).map_err(CliError::numeric)?;
            (b, r, Vec::new(), json!({}))
        }
        Target::Nodes(b) => {
            let r = superhedge(&tree, &b).map_err(CliError::numeric)?;
            (b, r, Vec::new(), json!({}))
        }
        Target::Consumption(plan) => {
            if !(args.capital > 0.0 && args.capital.is_finite()) {
                return Err(CliError::Parse(format!("--capital must be positive, got {}", args.capital)));
            }
            let adm = admissibility_via_budget(&tree, &plan, args.capital).map_err(CliError::numeric)?;
            let mut checks = vec![tol.at_most(
                "capital_excess",
                (adm.sup_pairing - args.capital) / args.capital,
            )];
            if adm.admissible {
                checks.push(tol.at_most("admissible_wealth", (-adm.check.min_wealth).max(0.0)));
            }
            let results = json!({
                "admissible": adm.admissible,
                "sup_pairing": adm.sup_pairing,
                "capital": adm.capital,
                "min_wealth": adm.check.min_wealth,
            });
            (cumulative_consumption(&tree, &plan), adm.result, checks, results)
        }
    };
    let mut all = structural_checks(&tree, &b, &result, &tol);
    all.append(&mut checks);

    results["w0"] = json!(result.w0);
    results["stopping_nodes"] = json!(result.stop.iter().filter(|s| **s).count());
    report::write_csv(&ctx.out, "nodes.csv", &node_table(&tree, &b, &result))?;
    let row = vec![
        ("w0".into(), num(result.w0)),
        ("decomposition_residual".into(), num(decomposition_residual(&tree, &result))),
    ];
    Ok(RunOutput {
        summary: Summary::from_checks("superhedge", ctx.seed, inputs, all, results),
        row,
    })
}
