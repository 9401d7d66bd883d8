//! Primal and dual consumption problems on event trees and the checks that
//! tie them together: conjugacy of the value functions, the pointwise link
//! `U'(c) = gamma y Z` between optimizers, budget saturation, the structure
//! of the optimal wealth process and the derivative identities.

mod dual;
mod primal;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::tree::{ConsumptionPlan, Deflator, EventTree, Strategy, TreeError};
use crate::utility::{golden_max, log_grid, UtilityError, UtilitySpec};

pub use dual::{solve_dual, DualOptions, DualSolution, DualSolver};
pub use primal::{
    is_oracle_scale, plan_value, solve_primal_direct, solve_primal_with, PrimalOptions,
    PrimalSolution, ORACLE_MAX_BRANCHING, ORACLE_MAX_PERIODS,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DualityError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error("dual value is not finite at y = {y} (v(y) < infinity fails)")]
    DualInfinite { y: f64 },
    #[error("calibration of y failed: {0}")]
    Calibration(String),
    #[error("direct primal oracle failed: {0}")]
    Oracle(String),
    #[error("tree with {periods} periods and branching {branching} exceeds the direct-solver scale")]
    OracleScale { periods: usize, branching: usize },
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<DualityError>,
    },
}

pub type Result<T> = std::result::Result<T, DualityError>;

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| DualityError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}

/// `c_n = I(gamma_t y Z_n) = -V'(gamma_t y Z_n)` at every node.
pub fn candidate_consumption(
    tree: &EventTree,
    spec: &UtilitySpec,
    y: f64,
    deflator: &Deflator,
) -> Result<ConsumptionPlan> {
    let rates = tree
        .nodes()
        .iter()
        .zip(&deflator.values)
        .map(|(node, z)| spec.inverse_marginal(tree.clock().gamma(node.t) * y * z))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(ConsumptionPlan { rates })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub x: f64,
    pub y_star: f64,
    pub dual: DualSolution,
    pub plan: ConsumptionPlan,
    /// `E[sum c Z dt]` at `y_star` (target: `x`).
    pub budget: f64,
    pub evaluations: usize,
}

const Y_BRACKET: (f64, f64) = (1e-8, 1e8);

/// Finds `y` with `E[sum_t c_t(y) Z_t(y) dt] = x`, where `Z(y)` minimizes the
/// dual at `y` and `c(y) = I(gamma y Z(y))`.
pub fn calibrate_y(tree: &EventTree, spec: &UtilitySpec, x: f64) -> Result<Calibration> {
    let mut solver = DualSolver::new(tree, spec, DualOptions::default())?;
    calibrate_with(tree, spec, x, &mut solver)
}

pub fn calibrate_with(
    tree: &EventTree,
    spec: &UtilitySpec,
    x: f64,
    solver: &mut DualSolver<'_>,
) -> Result<Calibration> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(DualityError::Calibration(format!("x must be positive, got {x}")));
    }
    let mut evaluations = 0;
    let mut eval = |y: f64, solver: &mut DualSolver<'_>| -> Result<(f64, DualSolution, ConsumptionPlan)> {
        evaluations += 1;
        let sol = solver.solve(y)?;
        let plan = candidate_consumption(tree, spec, y, &sol.deflator)?;
        let budget = tree.budget_pairing(&plan, &sol.deflator)?;
        Ok((budget, sol, plan))
    };

    // bracket in log y: budget is strictly decreasing in y
    let mut lo = 1.0f64;
    let mut hi = 1.0f64;
    let (b1, _, _) = eval(1.0, solver)?;
    let (mut b_lo, mut b_hi) = (b1, b1);
    if b1 > x {
        while b_hi > x {
            lo = hi;
            b_lo = b_hi;
            hi *= 10.0;
            if hi > Y_BRACKET.1 {
                return Err(DualityError::Calibration(format!(
                    "no bracket in [{:e}, {:e}] for x = {x}",
                    Y_BRACKET.0, Y_BRACKET.1
                )));
            }
            b_hi = eval(hi, solver)?.0;
        }
    } else {
        while b_lo < x {
            hi = lo;
            b_hi = b_lo;
            lo /= 10.0;
            if lo < Y_BRACKET.0 {
                return Err(DualityError::Calibration(format!(
                    "no bracket in [{:e}, {:e}] for x = {x}",
                    Y_BRACKET.0, Y_BRACKET.1
                )));
            }
            b_lo = eval(lo, solver)?.0;
        }
    }

    // bisection to relative width 1e-6
    while hi / lo - 1.0 > 1e-6 {
        let mid = (lo * hi).sqrt();
        let b = eval(mid, solver)?.0;
        if b > x {
            lo = mid;
            b_lo = b;
        } else {
            hi = mid;
            b_hi = b;
        }
    }

    // secant on (log y, log budget), kept inside the bracket
    let target = x.ln();
    let (mut s0, mut g0) = (lo.ln(), b_lo.ln() - target);
    let (mut s1, mut g1) = (hi.ln(), b_hi.ln() - target);
    let mut best = if g0.abs() < g1.abs() { lo } else { hi };
    for _ in 0..60 {
        if g1 == g0 {
            break;
        }
        let mut s2 = s1 - g1 * (s1 - s0) / (g1 - g0);
        if !(s2 > lo.ln() && s2 < hi.ln()) {
            s2 = 0.5 * (lo.ln() + hi.ln());
        }
        let y2 = s2.exp();
        let (b2, _, _) = eval(y2, solver)?;
        let g2 = b2.ln() - target;
        if b2 > x {
            lo = lo.max(y2);
        } else {
            hi = hi.min(y2);
        }
        best = y2;
        let done = g2.abs() <= 1e-15 || (s2 - s1).abs() <= 1e-15 * s2.abs().max(1.0);
        s0 = s1;
        g0 = g1;
        s1 = s2;
        g1 = g2;
        if done {
            break;
        }
    }
    let (budget, dual, plan) = eval(best, solver)?;
    if ((budget - x) / x).abs() > 1e-9 {
        return Err(DualityError::Calibration(format!(
            "budget {budget} did not reach x = {x} (y = {best})"
        )));
    }
    Ok(Calibration {
        x,
        y_star: best,
        dual,
        plan,
        budget,
        evaluations,
    })
}

/// Pre-consumption optimal wealth from `X(n) Z(n) = E[sum_{s >= n} c_s Z_s dt | n]`.
pub fn optimal_wealth_from_dual(
    tree: &EventTree,
    plan: &ConsumptionPlan,
    deflator: &Deflator,
) -> Vec<f64> {
    let dt = tree.dt();
    let mut deflated = vec![0.0; tree.len()];
    for n in (0..tree.len()).rev() {
        let node = tree.node(n);
        let future: f64 = node
            .children
            .iter()
            .map(|&c| tree.node(c).prob * deflated[c])
            .sum();
        deflated[n] = plan.rates[n] * deflator.values[n] * dt + future;
    }
    deflated
        .iter()
        .zip(&deflator.values)
        .map(|(a, z)| a / z)
        .collect()
}

/// Recovers holdings financing a given wealth process:
/// `X(child) = X(node) - c(node) dt + H(node).(S(child) - S(node))`,
/// by least squares per node. Returns the strategy and the largest
/// replication error.
pub fn strategy_from_wealth(
    tree: &EventTree,
    wealth: &[f64],
    plan: &ConsumptionPlan,
) -> (Strategy, f64) {
    let d = tree.n_assets();
    let dt = tree.dt();
    let mut strategy = Strategy::zeros(tree);
    let mut worst = 0.0f64;
    for n in tree.non_terminal() {
        let node = tree.node(n);
        let k = node.children.len();
        let m = DMatrix::from_fn(k, d, |i, j| {
            tree.node(node.children[i]).prices[j] - node.prices[j]
        });
        let rhs = DVector::from_fn(k, |i, _| {
            wealth[node.children[i]] - (wealth[n] - plan.rates[n] * dt)
        });
        let svd = m.clone().svd(true, true);
        let h = svd
            .solve(&rhs, 1e-14 * svd.singular_values.amax())
            .unwrap_or_else(|_| DVector::zeros(d));
        let resid = (&m * &h - &rhs).amax();
        worst = worst.max(resid);
        strategy.holdings[n] = h.iter().copied().collect();
    }
    (strategy, worst)
}

/// Largest `|E[M(child) | n] - M(n)|` for
/// `M = X Z + sum_{s before n} c Z dt` with pre-consumption wealth `X`.
pub fn wealth_martingale_residual(
    tree: &EventTree,
    wealth: &[f64],
    plan: &ConsumptionPlan,
    deflator: &Deflator,
) -> f64 {
    let dt = tree.dt();
    let z = &deflator.values;
    let mut consumed = vec![0.0; tree.len()];
    for n in 0..tree.len() {
        for &c in &tree.node(n).children {
            consumed[c] = consumed[n] + plan.rates[n] * z[n] * dt;
        }
    }
    let m = |n: usize| wealth[n] * z[n] + consumed[n];
    tree.non_terminal()
        .map(|n| {
            let e: f64 = tree
                .node(n)
                .children
                .iter()
                .map(|&c| tree.node(c).prob * m(c))
                .sum();
            (e - m(n)).abs()
        })
        .fold(0.0, f64::max)
}

/// `E[X_t Z_t]` for `t = 0..=T` followed by the post-consumption terminal
/// value `E[(X_T - c_T dt) Z_T]`.
pub fn deflated_wealth_profile(
    tree: &EventTree,
    wealth: &[f64],
    plan: &ConsumptionPlan,
    deflator: &Deflator,
) -> Vec<f64> {
    let dt = tree.dt();
    let mut out: Vec<f64> = (0..=tree.horizon())
        .map(|t| tree.expectation_at(t, |n| wealth[n] * deflator.values[n]))
        .collect();
    out.push(tree.expectation_at(tree.horizon(), |n| {
        (wealth[n] - plan.rates[n] * dt) * deflator.values[n]
    }));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeResiduals {
    /// Central-difference `u'(x)`.
    pub u_prime: f64,
    /// Central-difference `v'(y*)`.
    pub v_prime: f64,
    /// `sum kappa E[U'(c) c]`, to be compared with `x u'(x)`.
    pub primal_rhs: f64,
    /// `sum E[V'(gamma y Z) y Z] dt`, to be compared with `y v'(y)`.
    pub dual_rhs: f64,
    /// Relative residual of `x u'(x) = sum kappa E[U'(c) c]`.
    pub primal: f64,
    /// Relative residual of `y v'(y) = sum E[V'(gamma y Z) y Z] dt`.
    pub dual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimalSource {
    /// Independent direct primal solver.
    Direct,
    /// `v(y*) + x y*` (tree above oracle scale).
    Dual,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityReport {
    pub x: f64,
    pub y_star: f64,
    pub u_of_x: f64,
    pub u_source: PrimalSource,
    pub v_of_y: f64,
    /// `u(x) - min_y [v(y) + x y]` over a y-grid containing `y*`.
    pub conjugacy_gap: f64,
    /// Relative residual of `U'(c) = gamma y* Z`, maximized over nodes.
    pub pdc_max_residual: f64,
    /// `|<c, Y> - x y|` with `Y = y* Z`.
    pub budget_residual: f64,
    pub martingale_max_residual: f64,
    /// `max |(X_T - c_T dt) Z_T|` over terminal nodes.
    pub terminal_deflated_wealth_max: f64,
    /// `E[X_t Z_t]` for each t, then the post-consumption terminal value.
    pub deflated_wealth: Vec<f64>,
    pub deflated_wealth_decreasing: bool,
    pub derivative_identity_residuals: DerivativeResiduals,
    /// Largest one-step replication error of the optimal wealth.
    pub hedge_residual: f64,
    /// `max |c_dual - c_direct|` when the direct solver ran.
    pub plan_max_difference: Option<f64>,
    pub dual_iterations: usize,
    pub dual_stationarity: f64,
    pub clock_tail_mass: f64,
    pub plan: ConsumptionPlan,
    pub wealth: Vec<f64>,
    pub deflator: Deflator,
}

/// Value of the primal problem along the dual route, `v(y*) + x y*`.
fn dual_route_value(tree: &EventTree, spec: &UtilitySpec, x: f64, solver: &mut DualSolver<'_>) -> Result<f64> {
    let cal = calibrate_with(tree, spec, x, solver)?;
    Ok(cal.dual.value + x * cal.y_star)
}

pub fn duality_report(tree: &EventTree, spec: &UtilitySpec, x: f64) -> Result<DualityReport> {
    let mut solver = DualSolver::new(tree, spec, DualOptions::default()).stage("solve_dual")?;
    let cal = calibrate_with(tree, spec, x, &mut solver).stage("calibrate_y")?;
    let y = cal.y_star;
    let z = cal.dual.deflator.clone();
    let plan = cal.plan.clone();
    let dt = tree.dt();

    let mut pdc = 0.0f64;
    for (n, node) in tree.nodes().iter().enumerate() {
        let target = tree.clock().gamma(node.t) * y * z.values[n];
        let lhs = spec.marginal(plan.rates[n]).map_err(DualityError::from).stage("candidate_consumption")?;
        pdc = pdc.max(((lhs - target) / target).abs());
    }
    let budget_residual = y * (cal.budget - x).abs();
    let wealth = optimal_wealth_from_dual(tree, &plan, &z);
    let martingale = wealth_martingale_residual(tree, &wealth, &plan, &z);
    let terminal = tree
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, node)| node.is_terminal())
        .map(|(n, _)| ((wealth[n] - plan.rates[n] * dt) * z.values[n]).abs())
        .fold(0.0, f64::max);
    let profile = deflated_wealth_profile(tree, &wealth, &plan, &z);
    let decreasing = profile.windows(2).all(|w| w[1] < w[0]);
    let (_, hedge_residual) = strategy_from_wealth(tree, &wealth, &plan);

    let (u_of_x, u_source, plan_diff) = if is_oracle_scale(tree) {
        let direct = solve_primal_direct(tree, spec, x).stage("solve_primal_direct")?;
        let diff = direct
            .plan
            .rates
            .iter()
            .zip(&plan.rates)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        (direct.value, PrimalSource::Direct, Some(diff))
    } else {
        (cal.dual.value + x * y, PrimalSource::Dual, None)
    };

    // conjugacy: grid around y* (y* itself included)
    let mut best = cal.dual.value + x * y;
    for yy in log_grid(y / 4.0, 4.0 * y, 21) {
        let v = solver.solve(yy).stage("conjugacy grid")?.value;
        best = best.min(v + x * yy);
    }
    solver.set_start(z.clone());
    let conjugacy_gap = u_of_x - best;

    // derivative identities by central differences
    let hx = 1e-4 * x;
    let u_plus = dual_route_value(tree, spec, x + hx, &mut solver).stage("derivative identities")?;
    let u_minus = dual_route_value(tree, spec, x - hx, &mut solver).stage("derivative identities")?;
    let u_prime = (u_plus - u_minus) / (2.0 * hx);
    let hy = 1e-4 * y;
    let v_plus = solver.solve(y + hy).stage("derivative identities")?.value;
    let v_minus = solver.solve(y - hy).stage("derivative identities")?.value;
    let v_prime = (v_plus - v_minus) / (2.0 * hy);
    let mut primal_rhs = 0.0;
    let mut dual_rhs = 0.0;
    for (n, node) in tree.nodes().iter().enumerate() {
        let c = plan.rates[n];
        primal_rhs += tree.node_weight(n) * spec.marginal(c)? * c;
        let arg = tree.clock().gamma(node.t) * y * z.values[n];
        dual_rhs += node.path_prob * dt * spec.conjugate_derivative(arg)? * y * z.values[n];
    }
    let derivative = DerivativeResiduals {
        u_prime,
        v_prime,
        primal_rhs,
        dual_rhs,
        primal: (x * u_prime - primal_rhs).abs() / primal_rhs.abs().max(1.0),
        dual: (y * v_prime - dual_rhs).abs() / dual_rhs.abs().max(1.0),
    };

    Ok(DualityReport {
        x,
        y_star: y,
        u_of_x,
        u_source,
        v_of_y: cal.dual.value,
        conjugacy_gap,
        pdc_max_residual: pdc,
        budget_residual,
        martingale_max_residual: martingale,
        terminal_deflated_wealth_max: terminal,
        deflated_wealth: profile,
        deflated_wealth_decreasing: decreasing,
        derivative_identity_residuals: derivative,
        hedge_residual,
        plan_max_difference: plan_diff,
        dual_iterations: cal.dual.iterations,
        dual_stationarity: cal.dual.stationarity,
        clock_tail_mass: tree.clock().tail_mass(),
        plan,
        wealth,
        deflator: z,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConjugacyRow {
    pub x: f64,
    pub u: f64,
    /// `inf_y [v(y) + x y]`, grid minimum refined by golden-section search.
    pub dual_bound: f64,
    pub argmin_y: f64,
    /// `dual_bound - u`, nonnegative by weak duality.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConjugacyTable {
    pub rows: Vec<ConjugacyRow>,
    /// `(y, v(y))` on the y-grid.
    pub dual_values: Vec<(f64, f64)>,
    pub u_source: PrimalSource,
    /// One-sided difference quotients of `u` at the ends of the x-grid.
    pub u_slope_ends: (f64, f64),
    /// One-sided difference quotients of `v` at the ends of the y-grid.
    pub v_slope_ends: (f64, f64),
}

fn end_slopes(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len();
    let slope = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) / (b.0 - a.0);
    (slope(points[0], points[1]), slope(points[n - 2], points[n - 1]))
}

/// Compares `u(x)` with `inf_y [v(y) + x y]` along grids.
pub fn conjugacy_scan(
    tree: &EventTree,
    spec: &UtilitySpec,
    x_grid: &[f64],
    y_grid: &[f64],
) -> Result<ConjugacyTable> {
    if x_grid.len() < 20 || y_grid.len() < 20 {
        return Err(DualityError::Solver(
            "conjugacy scan needs grids of at least 20 points".into(),
        ));
    }
    let mut solver = DualSolver::new(tree, spec, DualOptions::default())?;
    let dual_values = y_grid
        .iter()
        .map(|&y| solver.solve(y).map(|s| (y, s.value)))
        .collect::<Result<Vec<_>>>()?;
    let direct = is_oracle_scale(tree);
    let mut rows = Vec::with_capacity(x_grid.len());
    for &x in x_grid {
        let u = if direct {
            solve_primal_direct(tree, spec, x)?.value
        } else {
            dual_route_value(tree, spec, x, &mut solver)?
        };
        let (j, _) = dual_values
            .iter()
            .enumerate()
            .map(|(j, (y, v))| (j, v + x * y))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty grid");
        let lo = dual_values[j.saturating_sub(1)].0;
        let hi = dual_values[(j + 1).min(dual_values.len() - 1)].0;
        let mut failure = None;
        let s = golden_max(lo.ln(), hi.ln(), 1e-10, |s| {
            let y = s.exp();
            match solver.solve(y) {
                Ok(sol) => -(sol.value + x * y),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NEG_INFINITY
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let y_ref = s.exp();
        let refined = solver.solve(y_ref)?.value + x * y_ref;
        let grid_min = dual_values[j].1 + x * dual_values[j].0;
        let (dual_bound, argmin_y) = if refined < grid_min {
            (refined, y_ref)
        } else {
            (grid_min, dual_values[j].0)
        };
        rows.push(ConjugacyRow {
            x,
            u,
            dual_bound,
            argmin_y,
            gap: dual_bound - u,
        });
    }
    let u_points: Vec<(f64, f64)> = rows.iter().map(|r| (r.x, r.u)).collect();
    Ok(ConjugacyTable {
        u_slope_ends: end_slopes(&u_points),
        v_slope_ends: end_slopes(&dual_values),
        rows,
        dual_values,
        u_source: if direct {
            PrimalSource::Direct
        } else {
            PrimalSource::Dual
        },
    })
}
