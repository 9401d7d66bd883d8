//! Smallest dominating wealth processes and their optional decomposition
//! `W = W_0 + (phi . S) - A` on event trees.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::tree::polytope::combinations;
use crate::tree::{AdmissibilityReport, ConsumptionPlan, Deflator, EventTree, Strategy, TreeError};

/// Lower bound on transition weights used for the inner maximization. The
/// supremum over strictly positive measures equals the maximum over the
/// closed polytope.
pub const POLYTOPE_FLOOR: f64 = 0.0;
const DECOMPOSITION_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SuperhedgeError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("target process: {0}")]
    Target(String),
    #[error("node {node}: optional decomposition failed: {reason}")]
    Decomposition { node: usize, reason: String },
    #[error("claim spec: {0}")]
    Claim(String),
}

pub type Result<T> = std::result::Result<T, SuperhedgeError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuperhedgeResult {
    pub w: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub a: Vec<f64>,
    pub w0: f64,
    /// Polytope vertex attaining the continuation value at each
    /// non-terminal node (empty at terminal nodes).
    pub maximizing_measure: Vec<Vec<f64>>,
    /// Nodes where stopping is optimal (`W = b`).
    pub stop: Vec<bool>,
}

fn check_target(tree: &EventTree, b: &[f64]) -> Result<()> {
    if b.len() != tree.len() {
        return Err(SuperhedgeError::Target(format!(
            "{} values for {} nodes",
            b.len(),
            tree.len()
        )));
    }
    if let Some((i, v)) = b.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
        return Err(SuperhedgeError::Target(format!("b({i}) = {v} is not a nonnegative number")));
    }
    Ok(())
}

/// `W(node) = max(b(node), max_q sum q_i W(child_i))` over the vertices of
/// the node's martingale polytope; returns `W` and the maximizing vertices.
pub fn smallest_dominating_with_measures(
    tree: &EventTree,
    b: &[f64],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    check_target(tree, b)?;
    let polytopes = tree.all_polytopes(POLYTOPE_FLOOR)?;
    let mut w = b.to_vec();
    let mut measures = vec![Vec::new(); tree.len()];
    for n in (0..tree.len()).rev() {
        let Some(poly) = &polytopes[n] else { continue };
        let children = &tree.node(n).children;
        let (value, vertex) = poly
            .vertices
            .iter()
            .map(|q| (q.iter().zip(children).map(|(qi, &c)| qi * w[c]).sum::<f64>(), q))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .expect("polytope has a vertex");
        w[n] = w[n].max(value);
        measures[n] = vertex.clone();
    }
    Ok((w, measures))
}

pub fn smallest_dominating(tree: &EventTree, b: &[f64]) -> Result<Vec<f64>> {
    smallest_dominating_with_measures(tree, b).map(|(w, _)| w)
}

/// Per node, the hedge `phi` with `phi . dS_i >= dW_i` on every child that
/// minimizes the largest slack, ties broken by minimum Euclidean norm; then
/// `A(child) = A(node) + phi . dS - dW`.
pub fn optional_decomposition(tree: &EventTree, w: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if w.len() != tree.len() {
        return Err(SuperhedgeError::Target(format!(
            "{} values for {} nodes",
            w.len(),
            tree.len()
        )));
    }
    let d = tree.n_assets();
    let mut phi = vec![vec![0.0; d]; tree.len()];
    let mut a = vec![0.0; tree.len()];
    for n in tree.non_terminal() {
        let node = tree.node(n);
        let k = node.children.len();
        let g = DMatrix::from_fn(k, d, |i, j| tree.node(node.children[i]).prices[j] - node.prices[j]);
        let h = DVector::from_fn(k, |i, _| w[node.children[i]] - w[n]);
        let hedge = min_slack_hedge(&g, &h).map_err(|reason| SuperhedgeError::Decomposition {
            node: n,
            reason,
        })?;
        for (i, &c) in node.children.iter().enumerate() {
            let gain: f64 = (0..d).map(|j| hedge[j] * g[(i, j)]).sum();
            let inc = gain - h[i];
            if inc < -DECOMPOSITION_TOL * (1.0 + h.amax()) {
                return Err(SuperhedgeError::Decomposition {
                    node: n,
                    reason: format!("negative increment {inc:e} towards child {c}"),
                });
            }
            a[c] = a[n] + inc.max(0.0);
        }
        phi[n] = hedge.iter().copied().collect();
    }
    Ok((phi, a))
}

/// Solves `min s` over `h <= G phi <= h + s`, then the minimum-norm `phi`
/// at that `s`, by enumerating active sets in the row space of `G`.
fn min_slack_hedge(g: &DMatrix<f64>, h: &DVector<f64>) -> std::result::Result<DVector<f64>, String> {
    let (k, d) = g.shape();
    let svd = g.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors");
    let smax = svd.singular_values.amax();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-12 * smax)
        .collect();
    let r = keep.len();
    // phi = basis theta, basis: d x r
    let basis = DMatrix::from_fn(d, r, |i, j| v_t[(keep[j], i)]);
    let gr = g * &basis;
    let tol = 1e-11 * (1.0 + h.amax());

    if r == 0 {
        return if h.iter().all(|v| *v <= tol) {
            Ok(DVector::zeros(d))
        } else {
            Err("no hedge satisfies the domination constraints".into())
        };
    }

    // LP over (theta, s): rows 0..k are g theta >= h, rows k..2k are g theta - s <= h
    let row = |i: usize| -> (Vec<f64>, f64) {
        let mut coeffs: Vec<f64> = (0..r).map(|j| gr[(i % k, j)]).collect();
        coeffs.push(if i < k { 0.0 } else { -1.0 });
        (coeffs, h[i % k])
    };
    let lp_feasible = |x: &DVector<f64>| {
        (0..k).all(|i| {
            let v: f64 = (0..r).map(|j| gr[(i, j)] * x[j]).sum();
            v >= h[i] - tol && v - x[r] <= h[i] + tol
        })
    };
    let mut best_s = f64::INFINITY;
    for subset in combinations(2 * k, r + 1) {
        let mut m = DMatrix::zeros(r + 1, r + 1);
        let mut rhs = DVector::zeros(r + 1);
        for (a, &i) in subset.iter().enumerate() {
            let (coeffs, b) = row(i);
            for (j, c) in coeffs.into_iter().enumerate() {
                m[(a, j)] = c;
            }
            rhs[a] = b;
        }
        let Some(x) = m.lu().solve(&rhs) else { continue };
        if x.iter().all(|v| v.is_finite()) && lp_feasible(&x) && x[r] < best_s {
            best_s = x[r];
        }
    }
    if !best_s.is_finite() {
        return Err("no hedge satisfies the domination constraints".into());
    }
    let s = best_s.max(0.0);

    // minimum-norm theta with h <= gr theta <= h + s
    let feasible = |x: &DVector<f64>| {
        (0..k).all(|i| {
            let v: f64 = (0..r).map(|j| gr[(i, j)] * x[j]).sum();
            v >= h[i] - tol && v <= h[i] + s + tol
        })
    };
    let mut best: Option<DVector<f64>> = None;
    for size in 0..=r.min(2 * k) {
        for subset in combinations(2 * k, size) {
            let m = DMatrix::from_fn(size, r, |a, j| gr[(subset[a] % k, j)]);
            let rhs = DVector::from_fn(size, |a, _| {
                let i = subset[a];
                if i < k {
                    h[i]
                } else {
                    h[i - k] + s
                }
            });
            let x = if size == 0 {
                DVector::zeros(r)
            } else {
                let svd = m.clone().svd(true, true);
                let top = svd.singular_values.amax();
                match svd.solve(&rhs, 1e-12 * top.max(1e-300)) {
                    Ok(x) => x,
                    Err(_) => continue,
                }
            };
            if (&m * &x - &rhs).iter().any(|e| e.abs() > tol) || !feasible(&x) {
                continue;
            }
            if best.as_ref().is_none_or(|b| x.norm() < b.norm() - 1e-15) {
                best = Some(x);
            }
        }
    }
    let theta = best.ok_or_else(|| "minimum-norm hedge not found".to_string())?;
    Ok(&basis * theta)
}

pub fn superhedge(tree: &EventTree, b: &[f64]) -> Result<SuperhedgeResult> {
    let (w, measures) = smallest_dominating_with_measures(tree, b)?;
    let (phi, a) = optional_decomposition(tree, &w)?;
    let stop = w
        .iter()
        .zip(b)
        .map(|(wv, bv)| (wv - bv).abs() <= 1e-12 * (1.0 + bv.abs()))
        .collect();
    Ok(SuperhedgeResult {
        w0: w[0],
        w,
        phi,
        a,
        maximizing_measure: measures,
        stop,
    })
}

/// Largest `|W0 + (phi . S) - A - W|` over nodes.
pub fn decomposition_residual(tree: &EventTree, result: &SuperhedgeResult) -> f64 {
    let mut gains = vec![0.0; tree.len()];
    let mut worst = (result.w0 - result.w[0]).abs() + result.a[0].abs();
    for n in tree.non_terminal() {
        let node = tree.node(n);
        for &c in &node.children {
            let step: f64 = result.phi[n]
                .iter()
                .zip(node.prices.iter().zip(&tree.node(c).prices))
                .map(|(p, (s0, s1))| p * (s1 - s0))
                .sum();
            gains[c] = gains[n] + step;
            worst = worst.max((result.w0 + gains[c] - result.a[c] - result.w[c]).abs());
        }
    }
    worst
}

/// `E[Z_T X_T]` for the node-measurable stopping time that stops at the
/// first node on each path with `stop` set (terminal nodes always stop).
pub fn stopped_expectation(tree: &EventTree, deflator: &Deflator, stop: &[bool], x: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut stack = vec![0usize];
    while let Some(n) = stack.pop() {
        let node = tree.node(n);
        if stop[n] || node.is_terminal() {
            total += node.path_prob * deflator.values[n] * x[n];
        } else {
            stack.extend(&node.children);
        }
    }
    total
}

/// Inclusive cumulative consumption `C(n) = sum_{s <= n} c_s dt`.
pub fn cumulative_consumption(tree: &EventTree, plan: &ConsumptionPlan) -> Vec<f64> {
    let dt = tree.dt();
    let mut c = vec![0.0; tree.len()];
    for n in 0..tree.len() {
        let before = tree.node(n).parent.map_or(0.0, |p| c[p]);
        c[n] = before + plan.rates[n] * dt;
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetAdmissibility {
    pub admissible: bool,
    /// `sup_Z E[sum c Z dt]`, equal to the smallest dominating capital.
    pub sup_pairing: f64,
    pub w0: f64,
    pub capital: f64,
    pub result: SuperhedgeResult,
    /// Strategy of the dominating wealth; financing `c` from `capital`
    /// when admissible.
    pub strategy: Strategy,
    pub check: AdmissibilityReport,
}

/// Decides whether `plan` can be financed from `capital` by superhedging
/// its cumulative consumption.
pub fn admissibility_via_budget(
    tree: &EventTree,
    plan: &ConsumptionPlan,
    capital: f64,
) -> Result<BudgetAdmissibility> {
    if plan.rates.len() != tree.len() {
        return Err(SuperhedgeError::Target(format!(
            "plan has {} rates for {} nodes",
            plan.rates.len(),
            tree.len()
        )));
    }
    if let Some(v) = plan.rates.iter().find(|v| !(**v >= 0.0)) {
        return Err(SuperhedgeError::Target(format!("negative consumption rate {v}")));
    }
    let cumulative = cumulative_consumption(tree, plan);
    let result = superhedge(tree, &cumulative)?;
    let strategy = Strategy {
        holdings: result.phi.clone(),
    };
    let check = tree.is_admissible(capital, &strategy, plan)?;
    let within = result.w0 <= capital * (1.0 + 1e-12) + 1e-15;
    if within && !check.admissible {
        return Err(SuperhedgeError::Decomposition {
            node: check.first_violation.unwrap_or(0),
            reason: format!(
                "dominating strategy from capital {capital} is not admissible (min wealth {:e})",
                check.min_wealth
            ),
        });
    }
    Ok(BudgetAdmissibility {
        admissible: within,
        sup_pairing: result.w0,
        w0: result.w0,
        capital,
        result,
        strategy,
        check,
    })
}

/// Payoff targets on a tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Claim {
    /// European payoff on terminal prices of one asset.
    Put { strike: f64, asset: usize },
    Call { strike: f64, asset: usize },
    /// Payoff available at every node.
    AmericanPut { strike: f64, asset: usize },
    AmericanCall { strike: f64, asset: usize },
}

impl Claim {
    pub fn target(&self, tree: &EventTree) -> Result<Vec<f64>> {
        let (strike, asset, american, put) = match *self {
            Claim::Put { strike, asset } => (strike, asset, false, true),
            Claim::Call { strike, asset } => (strike, asset, false, false),
            Claim::AmericanPut { strike, asset } => (strike, asset, true, true),
            Claim::AmericanCall { strike, asset } => (strike, asset, true, false),
        };
        if asset >= tree.n_assets() {
            return Err(SuperhedgeError::Claim(format!(
                "asset {asset} out of range for {} assets",
                tree.n_assets()
            )));
        }
        Ok(tree
            .nodes()
            .iter()
            .map(|n| {
                if !american && !n.is_terminal() {
                    return 0.0;
                }
                let s = n.prices[asset];
                if put {
                    (strike - s).max(0.0)
                } else {
                    (s - strike).max(0.0)
                }
            })
            .collect())
    }
}

impl FromStr for Claim {
    type Err = SuperhedgeError;

    /// `put:K`, `call:K`, `american-put:K`, `american-call:K`, optionally
    /// followed by `@asset`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| SuperhedgeError::Claim(format!("expected KIND:STRIKE, got {s:?}")))?;
        let (strike, asset) = match rest.split_once('@') {
            Some((k, a)) => (k, a.parse::<usize>().map_err(|e| SuperhedgeError::Claim(format!("asset {a:?}: {e}")))?),
            None => (rest, 0),
        };
        let strike: f64 = strike
            .parse()
            .map_err(|e| SuperhedgeError::Claim(format!("strike {strike:?}: {e}")))?;
        if !(strike >= 0.0 && strike.is_finite()) {
            return Err(SuperhedgeError::Claim(format!("strike must be nonnegative, got {strike}")));
        }
        match kind {
            "put" => Ok(Claim::Put { strike, asset }),
            "call" => Ok(Claim::Call { strike, asset }),
            "american-put" => Ok(Claim::AmericanPut { strike, asset }),
            "american-call" => Ok(Claim::AmericanCall { strike, asset }),
            other => Err(SuperhedgeError::Claim(format!("unknown claim kind {other:?}"))),
        }
    }
}
