//! One-step martingale measures at a node:
//! `{q : sum q = 1, q >= floor, sum_i q_i S(child_i) = S(node)}`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

/// Affine description plus vertex list of the conditional martingale
/// measures at a non-terminal node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingalePolytope {
    pub node: usize,
    pub floor: f64,
    /// Mean of the vertices; strictly inside whenever the polytope has
    /// interior relative to its affine hull.
    pub feasible_point: Vec<f64>,
    /// Orthonormal basis of the directions keeping both the mass and the
    /// martingale constraints (one vector per free dimension).
    pub null_basis: Vec<Vec<f64>>,
    pub vertices: Vec<Vec<f64>>,
}

impl MartingalePolytope {
    pub fn dimension(&self) -> usize {
        if self.vertices.len() <= 1 {
            0
        } else {
            self.null_basis.len()
        }
    }

    pub fn is_singleton(&self) -> bool {
        self.vertices.len() == 1
    }

    /// Membership test with absolute tolerance `tol` on the equality
    /// constraints (the martingale constraint is scaled by the price level).
    pub fn contains(&self, q: &[f64], constraints: &ConstraintRows, tol: f64) -> bool {
        if q.len() != constraints.k {
            return false;
        }
        if q.iter().any(|&qi| !(qi >= self.floor - 1e-15)) {
            return false;
        }
        constraints.residual(q) <= tol
    }
}

/// Constraint matrix `A q = b` of a node: first row is total mass, the
/// following rows one per asset.
#[derive(Debug, Clone)]
pub struct ConstraintRows {
    pub k: usize,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    scale: f64,
}

impl ConstraintRows {
    pub fn new(child_prices: &[&[f64]], node_prices: &[f64]) -> Self {
        let k = child_prices.len();
        let d = node_prices.len();
        let mut a = DMatrix::zeros(1 + d, k);
        let mut b = DVector::zeros(1 + d);
        b[0] = 1.0;
        let mut scale = 1.0f64;
        for (i, s) in child_prices.iter().enumerate() {
            a[(0, i)] = 1.0;
            for j in 0..d {
                a[(1 + j, i)] = s[j];
                scale = scale.max(s[j].abs());
            }
        }
        for j in 0..d {
            b[1 + j] = node_prices[j];
        }
        Self { k, a, b, scale }
    }

    /// Largest constraint violation relative to the price scale.
    pub fn residual(&self, q: &[f64]) -> f64 {
        let qv = DVector::from_column_slice(q);
        let r = &self.a * qv - &self.b;
        r.amax() / self.scale
    }
}

pub(crate) fn build(
    node: usize,
    rows: &ConstraintRows,
    floor: f64,
) -> Option<MartingalePolytope> {
    let k = rows.k;
    let ata = rows.a.transpose() * &rows.a;
    let eig = SymmetricEigen::new(ata);
    let max_ev = eig.eigenvalues.amax().max(1e-300);
    let mut null_basis = Vec::new();
    for (i, ev) in eig.eigenvalues.iter().enumerate() {
        if *ev <= 1e-12 * max_ev {
            null_basis.push(eig.eigenvectors.column(i).iter().copied().collect::<Vec<_>>());
        }
    }
    let rank = k - null_basis.len();

    // shift q = floor + r, r >= 0
    let ones = DVector::from_element(k, floor);
    let rhs = &rows.b - &rows.a * ones;

    let mut vertices: Vec<Vec<f64>> = Vec::new();
    for basis in combinations(k, rank) {
        let sub = DMatrix::from_fn(rows.a.nrows(), rank, |r, c| rows.a[(r, basis[c])]);
        let svd = sub.clone().svd(true, true);
        let smax = svd.singular_values.amax();
        if svd.singular_values.iter().any(|s| *s <= 1e-12 * smax) {
            continue;
        }
        let Ok(sol) = svd.solve(&rhs, 0.0) else {
            continue;
        };
        let resid = (&sub * &sol - &rhs).amax() / rows.scale;
        if resid > 1e-11 {
            continue;
        }
        if sol.iter().any(|&v| v < -1e-13) {
            continue;
        }
        let mut q = vec![floor; k];
        for (c, &idx) in basis.iter().enumerate() {
            q[idx] = floor + sol[c].max(0.0);
        }
        if !vertices
            .iter()
            .any(|v| v.iter().zip(&q).all(|(a, b)| (a - b).abs() <= 1e-12))
        {
            vertices.push(q);
        }
    }
    if vertices.is_empty() {
        return None;
    }
    let mut feasible_point = vec![0.0; k];
    for v in &vertices {
        for (f, x) in feasible_point.iter_mut().zip(v) {
            *f += x / vertices.len() as f64;
        }
    }
    Some(MartingalePolytope {
        node,
        floor,
        feasible_point,
        null_basis,
        vertices,
    })
}

/// All `r`-subsets of `0..n` in lexicographic order.
pub(crate) fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if r > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..r).collect();
    loop {
        out.push(idx.clone());
        let mut i = r;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - r {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..r {
            idx[j] = idx[j - 1] + 1;
        }
    }
}
