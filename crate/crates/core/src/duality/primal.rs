//! Direct primal solver, used as an oracle independent of the dual route.
//!
//! Terminal consumption eats the remaining wealth (`c_T dt = X_T`), which
//! leaves an unconstrained concave program in the intermediate consumption
//! rates and holdings, solved by damped Newton steps.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::tree::{AdmissibilityReport, ConsumptionPlan, EventTree, Strategy};
use crate::utility::UtilitySpec;

use super::{DualityError, Result};

pub const ORACLE_MAX_PERIODS: usize = 4;
pub const ORACLE_MAX_BRANCHING: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrimalSolution {
    pub x: f64,
    pub plan: ConsumptionPlan,
    pub strategy: Strategy,
    pub value: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub admissibility: AdmissibilityReport,
}

/// Whether a tree is small enough for [`solve_primal_direct`].
pub fn is_oracle_scale(tree: &EventTree) -> bool {
    tree.horizon() <= ORACLE_MAX_PERIODS && tree.max_branching() <= ORACLE_MAX_BRANCHING
}

/// `sum_n kappa_t P(n) U(c_n)`; `-inf` when a node consumes nothing and
/// `U(0+) = -inf`.
pub fn plan_value(tree: &EventTree, spec: &UtilitySpec, plan: &ConsumptionPlan) -> Result<f64> {
    let mut total = 0.0;
    for (n, &c) in plan.rates.iter().enumerate() {
        let u = if c == 0.0 {
            spec.value_at_zero()
        } else {
            spec.value(c)?
        };
        total += tree.node_weight(n) * u;
    }
    Ok(total)
}

struct Layout {
    /// variable index of c at each non-terminal node
    c_index: Vec<Option<usize>>,
    /// first variable index of H at each non-terminal node
    h_index: Vec<Option<usize>>,
    n_vars: usize,
    leaves: Vec<usize>,
    /// for each leaf: sparse derivative of X_leaf w.r.t. the variables
    leaf_grad: Vec<Vec<(usize, f64)>>,
}

impl Layout {
    fn new(tree: &EventTree) -> Self {
        let d = tree.n_assets();
        let dt = tree.dt();
        let mut c_index = vec![None; tree.len()];
        let mut h_index = vec![None; tree.len()];
        let mut n_vars = 0;
        for n in tree.non_terminal() {
            c_index[n] = Some(n_vars);
            h_index[n] = Some(n_vars + 1);
            n_vars += 1 + d;
        }
        let leaves: Vec<usize> = (0..tree.len()).filter(|&n| tree.node(n).is_terminal()).collect();
        let leaf_grad = leaves
            .iter()
            .map(|&leaf| {
                let path = tree.path_to(leaf);
                let mut g = Vec::new();
                for w in path.windows(2) {
                    let (a, next) = (w[0], w[1]);
                    g.push((c_index[a].unwrap(), -dt));
                    let h0 = h_index[a].unwrap();
                    for j in 0..d {
                        g.push((h0 + j, tree.node(next).prices[j] - tree.node(a).prices[j]));
                    }
                }
                g
            })
            .collect();
        Self {
            c_index,
            h_index,
            n_vars,
            leaves,
            leaf_grad,
        }
    }
}

struct Objective<'a> {
    tree: &'a EventTree,
    spec: &'a UtilitySpec,
    layout: Layout,
    x: f64,
}

impl Objective<'_> {
    fn leaf_wealth(&self, v: &DVector<f64>) -> Vec<f64> {
        self.layout
            .leaf_grad
            .iter()
            .map(|g| self.x + g.iter().map(|(i, a)| a * v[*i]).sum::<f64>())
            .collect()
    }

    fn in_domain(&self, v: &DVector<f64>) -> bool {
        let floor = self.spec.domain_floor();
        let dt = self.tree.dt();
        self.layout.c_index.iter().flatten().all(|&i| v[i] >= floor && v[i].is_finite())
            && self.leaf_wealth(v).iter().all(|w| w / dt >= floor && w.is_finite())
    }

    fn value(&self, v: &DVector<f64>) -> Result<f64> {
        let dt = self.tree.dt();
        let mut total = 0.0;
        for (n, ci) in self.layout.c_index.iter().enumerate() {
            if let Some(i) = ci {
                total += self.tree.node_weight(n) * self.spec.value(v[*i])?;
            }
        }
        for (leaf, w) in self.layout.leaves.iter().zip(self.leaf_wealth(v)) {
            total += self.tree.node_weight(*leaf) * self.spec.value(w / dt)?;
        }
        Ok(total)
    }

    fn derivatives(&self, v: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let dt = self.tree.dt();
        let nv = self.layout.n_vars;
        let mut grad = DVector::zeros(nv);
        let mut hess = DMatrix::zeros(nv, nv);
        for (n, ci) in self.layout.c_index.iter().enumerate() {
            if let Some(i) = ci {
                let w = self.tree.node_weight(n);
                grad[*i] += w * self.spec.marginal(v[*i])?;
                hess[(*i, *i)] += w * self.spec.curvature(v[*i])?;
            }
        }
        for (k, (leaf, wealth)) in self.layout.leaves.iter().zip(self.leaf_wealth(v)).enumerate() {
            let w = self.tree.node_weight(*leaf);
            let c = wealth / dt;
            let d1 = w * self.spec.marginal(c)? / dt;
            let d2 = w * self.spec.curvature(c)? / (dt * dt);
            let g = &self.layout.leaf_grad[k];
            for &(i, a) in g {
                grad[i] += d1 * a;
                for &(j, b) in g {
                    hess[(i, j)] += d2 * a * b;
                }
            }
        }
        Ok((grad, hess))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimalOptions {
    pub max_iter: usize,
    pub decrement_tol: f64,
}

impl Default for PrimalOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            decrement_tol: 1e-26,
        }
    }
}

/// Maximizes `sum_t kappa_t E[U(c_t)]` over consumption and holdings with
/// nonnegative wealth, directly in the primal variables.
pub fn solve_primal_direct(tree: &EventTree, spec: &UtilitySpec, x: f64) -> Result<PrimalSolution> {
    solve_primal_with(tree, spec, x, PrimalOptions::default())
}

pub fn solve_primal_with(
    tree: &EventTree,
    spec: &UtilitySpec,
    x: f64,
    options: PrimalOptions,
) -> Result<PrimalSolution> {
    if !is_oracle_scale(tree) {
        return Err(DualityError::OracleScale {
            periods: tree.horizon(),
            branching: tree.max_branching(),
        });
    }
    if !(x > 0.0 && x.is_finite()) {
        return Err(DualityError::Oracle(format!("initial capital must be positive, got {x}")));
    }
    let dt = tree.dt();
    let horizon = tree.horizon();
    let layout = Layout::new(tree);
    let nv = layout.n_vars;
    let obj = Objective {
        tree,
        spec,
        layout,
        x,
    };

    let mut v = DVector::zeros(nv);
    let c0 = x / ((horizon + 1) as f64 * dt);
    for i in obj.layout.c_index.iter().flatten() {
        v[*i] = c0;
    }
    if !obj.in_domain(&v) {
        return Err(DualityError::Oracle(
            "uniform-consumption starting point is outside the utility domain".into(),
        ));
    }
    let mut f = obj.value(&v)?;
    let mut iterations = 0;
    let mut converged = nv == 0;
    let mut gradient_norm = 0.0;

    for _ in 0..options.max_iter {
        if nv == 0 {
            break;
        }
        let (grad, hess) = obj.derivatives(&v)?;
        gradient_norm = grad.amax();
        let neg = -hess;
        let scale = (0..nv).map(|i| neg[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
        let mut mu = 0.0;
        let step = loop {
            let mut m = neg.clone();
            for i in 0..nv {
                m[(i, i)] += mu;
            }
            if let Some(ch) = m.cholesky() {
                break ch.solve(&grad);
            }
            mu = if mu == 0.0 { 1e-14 * scale } else { mu * 10.0 };
            if mu > 1e6 * scale {
                return Err(DualityError::Oracle("primal Hessian regularization failed".into()));
            }
        };
        let decrement = grad.dot(&step);
        if decrement <= options.decrement_tol * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        iterations += 1;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..80 {
            let trial = &v + t * &step;
            if obj.in_domain(&trial) {
                let ft = obj.value(&trial)?;
                if ft > f && ft >= f + 1e-4 * t * decrement {
                    v = trial;
                    f = ft;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            // gain below the rounding of f: finish with a full Newton step
            if decrement <= 1e-12 * (1.0 + f.abs()) {
                let trial = &v + &step;
                if obj.in_domain(&trial) {
                    let ft = obj.value(&trial)?;
                    if ft >= f - 1e-14 * (1.0 + f.abs()) {
                        v = trial;
                        f = ft;
                    }
                }
                converged = true;
            }
            break;
        }
    }
    if !converged {
        return Err(DualityError::Oracle(format!(
            "direct primal solver did not converge in {} iterations (gradient {gradient_norm:e})",
            options.max_iter
        )));
    }

    let mut plan = ConsumptionPlan::zeros(tree);
    let mut strategy = Strategy::zeros(tree);
    for n in tree.non_terminal() {
        plan.rates[n] = v[obj.layout.c_index[n].unwrap()];
        let h0 = obj.layout.h_index[n].unwrap();
        for j in 0..tree.n_assets() {
            strategy.holdings[n][j] = v[h0 + j];
        }
    }
    for (leaf, w) in obj.layout.leaves.iter().zip(obj.leaf_wealth(&v)) {
        plan.rates[*leaf] = w / dt;
    }
    let admissibility = tree.is_admissible(x, &strategy, &plan)?;
    let gradient_norm = if nv == 0 { 0.0 } else { obj.derivatives(&v)?.0.amax() };
    Ok(PrimalSolution {
        x,
        plan,
        strategy,
        value: f,
        iterations,
        gradient_norm,
        admissibility,
    })
}
