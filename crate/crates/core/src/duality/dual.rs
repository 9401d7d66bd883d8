//! Dual problem on a tree:
//! `v(y) = min_Z sum_n kappa_t P(n) V(gamma_t y Z_n)` over transition-built
//! deflators with `Z(root) = 1`.
//!
//! The deflator set is parametrized by node values. In these coordinates
//! the constraints `E[Z(child) | n] = Z(n)` and `E[Z(child) S(child) | n] =
//! Z(n) S(n)` are linear and the objective is a separable convex function,
//! so an equality-constrained Newton method with a feasibility-preserving
//! backtracking line search converges to machine precision.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::tree::{Deflator, EventTree, DEFAULT_Q_MIN};
use crate::utility::{UtilityError, UtilitySpec};

use super::{DualityError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualOptions {
    pub q_min: f64,
    pub max_iter: usize,
    /// Stop when the squared Newton decrement falls below this value.
    pub decrement_tol: f64,
}

impl Default for DualOptions {
    fn default() -> Self {
        Self {
            q_min: DEFAULT_Q_MIN,
            max_iter: 200,
            decrement_tol: 1e-26,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualSolution {
    pub y: f64,
    /// Minimizing deflator normalized to `Z(root) = 1`.
    pub deflator: Deflator,
    pub value: f64,
    pub iterations: usize,
    /// Norm of the objective gradient projected on the feasible directions.
    pub stationarity: f64,
}

/// Linear constraints `A z = b` on the non-root node values.
struct DeflatorConstraints {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl DeflatorConstraints {
    fn new(tree: &EventTree) -> Self {
        let nv = tree.len() - 1;
        let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        for n in tree.non_terminal() {
            let node = tree.node(n);
            let k = node.children.len();
            let d = tree.n_assets();
            // children block: p_c [1; S_c / S_n], parent column: -1
            let mut m = DMatrix::zeros(1 + d, k);
            for (i, &c) in node.children.iter().enumerate() {
                let child = tree.node(c);
                m[(0, i)] = child.prob;
                for j in 0..d {
                    m[(1 + j, i)] = child.prob * child.prices[j] / node.prices[j];
                }
            }
            let svd = m.clone().svd(true, false);
            let u = svd.u.expect("left singular vectors");
            let smax = svd.singular_values.amax();
            for (r, s) in svd.singular_values.iter().enumerate() {
                if *s <= 1e-12 * smax {
                    continue;
                }
                let coeffs = u.column(r);
                let mut row = Vec::with_capacity(k + 1);
                let mut parent_coeff = 0.0;
                for j in 0..=d {
                    parent_coeff -= coeffs[j];
                }
                for (i, &c) in node.children.iter().enumerate() {
                    let mut v = 0.0;
                    for j in 0..=d {
                        v += coeffs[j] * m[(j, i)];
                    }
                    row.push((c - 1, v));
                }
                let rhs = if n == 0 {
                    -parent_coeff
                } else {
                    row.push((n - 1, parent_coeff));
                    0.0
                };
                rows.push((row, rhs));
            }
        }
        let mut a = DMatrix::zeros(rows.len(), nv);
        let mut b = DVector::zeros(rows.len());
        for (r, (row, rhs)) in rows.into_iter().enumerate() {
            for (col, v) in row {
                a[(r, col)] += v;
            }
            b[r] = rhs;
        }
        Self { a, b }
    }
}

/// Reusable solver; keeps the last minimizer as a warm start.
pub struct DualSolver<'a> {
    tree: &'a EventTree,
    spec: &'a UtilitySpec,
    options: DualOptions,
    constraints: Option<DeflatorConstraints>,
    complete: Option<Deflator>,
    start: Deflator,
    weights: Vec<f64>,
    gammas: Vec<f64>,
}

impl<'a> DualSolver<'a> {
    pub fn new(tree: &'a EventTree, spec: &'a UtilitySpec, options: DualOptions) -> Result<Self> {
        let polytopes = tree.all_polytopes(options.q_min)?;
        let transitions: Vec<Vec<f64>> = polytopes
            .iter()
            .map(|p| p.as_ref().map(|p| p.feasible_point.clone()).unwrap_or_default())
            .collect();
        let start = tree.deflator_from_transitions(&transitions, 1.0, options.q_min)?;
        let complete = polytopes.iter().flatten().all(|p| p.is_singleton());
        let weights = (0..tree.len()).map(|n| tree.node_weight(n)).collect();
        let gammas = tree
            .nodes()
            .iter()
            .map(|n| tree.clock().gamma(n.t))
            .collect();
        Ok(Self {
            tree,
            spec,
            options,
            constraints: if complete {
                None
            } else {
                Some(DeflatorConstraints::new(tree))
            },
            complete: complete.then(|| start.clone()),
            start,
            weights,
            gammas,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.complete.is_some()
    }

    pub fn set_start(&mut self, deflator: Deflator) {
        self.start = deflator;
    }

    pub fn objective(&self, y: f64, z: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (n, &zn) in z.iter().enumerate() {
            total += self.weights[n] * conj(self.spec, self.gammas[n] * y * zn)?;
        }
        if !total.is_finite() {
            return Err(DualityError::DualInfinite { y });
        }
        Ok(total)
    }

    fn within_floor(&self, z: &[f64]) -> bool {
        let q_min = self.options.q_min;
        if z.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return false;
        }
        self.tree.non_terminal().all(|n| {
            self.tree
                .node(n)
                .children
                .iter()
                .all(|&c| self.tree.node(c).prob * z[c] >= q_min * z[n] * (1.0 - 1e-12))
        })
    }

    pub fn solve(&mut self, y: f64) -> Result<DualSolution> {
        if !(y > 0.0 && y.is_finite()) {
            return Err(DualityError::Utility(UtilityError::Domain {
                what: "dual argument y",
                value: y,
                floor: f64::MIN_POSITIVE,
            }));
        }
        if let Some(z) = &self.complete {
            let value = self.objective(y, &z.values)?;
            return Ok(DualSolution {
                y,
                deflator: z.clone(),
                value,
                iterations: 0,
                stationarity: 0.0,
            });
        }
        let cons = self.constraints.as_ref().expect("incomplete tree has constraints");
        let nv = self.tree.len() - 1;
        let mut z = self.start.values.clone();
        let mut f = self.objective(y, &z)?;
        let mut iterations = 0;
        let mut grad = DVector::zeros(nv);
        let mut hess = DVector::zeros(nv);

        for _ in 0..self.options.max_iter {
            self.derivatives(y, &z, &mut grad, &mut hess)?;
            let zv = DVector::from_column_slice(&z[1..]);
            let r = &cons.a * &zv - &cons.b;
            let hinv = hess.map(|h| 1.0 / h);
            let ah = DMatrix::from_fn(cons.a.nrows(), nv, |i, j| cons.a[(i, j)] * hinv[j]);
            let schur = &ah * cons.a.transpose();
            let rhs = &r - &ah * &grad;
            let nu = match schur.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => schur
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| DualityError::Solver("singular dual KKT system".into()))?,
            };
            let step = -(hinv.component_mul(&(&grad + cons.a.transpose() * &nu)));
            let decrement: f64 = step.iter().zip(hess.iter()).map(|(s, h)| s * s * h).sum();
            if decrement <= self.options.decrement_tol * (1.0 + f.abs()) {
                break;
            }
            iterations += 1;
            let slope = grad.dot(&step);
            let mut t = 1.0;
            let mut accepted = false;
            let mut trial = z.clone();
            for _ in 0..80 {
                for i in 0..nv {
                    trial[i + 1] = z[i + 1] + t * step[i];
                }
                if self.within_floor(&trial) {
                    let ft = self.objective(y, &trial)?;
                    if ft <= f + 1e-4 * t * slope || (decrement < 1e-18 && ft <= f + 1e-15 * f.abs()) {
                        z.copy_from_slice(&trial);
                        f = ft;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        self.derivatives(y, &z, &mut grad, &mut hess)?;
        let stationarity = projected_norm(&cons.a, &grad);
        let deflator = Deflator { values: z };
        self.start = deflator.clone();
        Ok(DualSolution {
            y,
            deflator,
            value: f,
            iterations,
            stationarity,
        })
    }

    fn derivatives(
        &self,
        y: f64,
        z: &[f64],
        grad: &mut DVector<f64>,
        hess: &mut DVector<f64>,
    ) -> Result<()> {
        for n in 1..z.len() {
            let scale = self.gammas[n] * y;
            let arg = scale * z[n];
            grad[n - 1] = self.weights[n] * scale * self.spec.conjugate_derivative(arg)?;
            hess[n - 1] = self.weights[n] * scale * scale * self.spec.conjugate_curvature(arg)?;
        }
        Ok(())
    }
}

fn conj(spec: &UtilitySpec, y: f64) -> Result<f64> {
    spec.conjugate(y).map_err(|e| match e {
        UtilityError::UnboundedConjugate { y } => DualityError::DualInfinite { y },
        other => DualityError::Utility(other),
    })
}

/// `|| g - A^T (A A^T)^{-1} A g ||`.
fn projected_norm(a: &DMatrix<f64>, g: &DVector<f64>) -> f64 {
    let aat = a * a.transpose();
    let rhs = a * g;
    let nu = match aat.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => match aat.lu().solve(&rhs) {
            Some(v) => v,
            None => return f64::NAN,
        },
    };
    (g - a.transpose() * nu).norm()
}

/// One-shot dual solve.
pub fn solve_dual(tree: &EventTree, spec: &UtilitySpec, y: f64) -> Result<DualSolution> {
    DualSolver::new(tree, spec, DualOptions::default())?.solve(y)
}
