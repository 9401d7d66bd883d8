//! Finite discrete-time event-tree markets.
//!
//! Nodes are stored in breadth-first order, so every parent index is smaller
//! than the indices of its children and a reverse sweep over `0..len` is a
//! valid backward induction order.
//!
//! Conventions used throughout the crate:
//! * consumption `c` at a node is a rate paid over the following period, so
//!   `c * dt` leaves the wealth before the next price move;
//! * wealth `X` at a node is measured *before* that node's consumption;
//! * at terminal nodes the plan must satisfy `c * dt <= X`.

mod io;
pub mod polytope;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{ClockRecord, NodeRecord, TreeFile};
pub use polytope::{ConstraintRows, MartingalePolytope};

/// Lower bound on one-step martingale transition probabilities, keeping
/// transition-built deflators strictly positive.
pub const DEFAULT_Q_MIN: f64 = 1e-9;
/// Admissibility tolerance on wealth.
pub const WEALTH_TOL: f64 = 1e-12;
pub const DEFAULT_NODE_CAP: usize = 200_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("invalid tree: {0}")]
    Invalid(String),
    #[error("tree would have {nodes} nodes, above the cap of {cap}")]
    SizeCap { nodes: usize, cap: usize },
    #[error("node {node}: no one-step martingale measure (no deflator exists; NUPBR fails)")]
    NoDeflator { node: usize },
    #[error("node {node}: transition measure outside the martingale polytope: {reason}")]
    InvalidMeasure { node: usize, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tree io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, TreeError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub t: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Conditional probability of reaching this node from its parent
    /// (1 at the root).
    pub prob: f64,
    /// Unconditional probability of the node.
    pub path_prob: f64,
    pub prices: Vec<f64>,
}

impl Node {
    pub fn is_terminal(&self) -> bool {
        self.children.is_empty()
    }
}

/// Per-time utility weights `kappa_t` and the reciprocal densities
/// `gamma_t = dt / kappa_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clock {
    alpha: f64,
    dt: f64,
    kappa: Vec<f64>,
    gamma: Vec<f64>,
    geometric: bool,
}

impl Clock {
    /// `kappa_t = exp(-alpha t dt) dt`, `gamma_t = exp(alpha t dt)`, for
    /// `t = 0..=horizon`.
    pub fn geometric(alpha: f64, dt: f64, horizon: usize) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(TreeError::Invalid(format!("alpha must be >= 0, got {alpha}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(TreeError::Invalid(format!("dt must be positive, got {dt}")));
        }
        let kappa = (0..=horizon)
            .map(|t| (-alpha * t as f64 * dt).exp() * dt)
            .collect();
        let gamma = (0..=horizon).map(|t| (alpha * t as f64 * dt).exp()).collect();
        Ok(Self {
            alpha,
            dt,
            kappa,
            gamma,
            geometric: true,
        })
    }

    /// Arbitrary positive weights, one per time index.
    pub fn from_weights(dt: f64, kappa: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(TreeError::Invalid(format!("dt must be positive, got {dt}")));
        }
        if kappa.is_empty() || kappa.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            return Err(TreeError::Invalid("clock weights must be positive and finite".into()));
        }
        let gamma = kappa.iter().map(|k| dt / k).collect();
        Ok(Self {
            alpha: 0.0,
            dt,
            kappa,
            gamma,
            geometric: false,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> usize {
        self.kappa.len() - 1
    }

    pub fn kappa(&self, t: usize) -> f64 {
        self.kappa[t]
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }

    pub fn kappas(&self) -> &[f64] {
        &self.kappa
    }

    pub fn is_geometric(&self) -> bool {
        self.geometric
    }

    /// Total clock mass on the tree horizon.
    pub fn total_mass(&self) -> f64 {
        self.kappa.iter().sum()
    }

    /// Mass of the geometric clock beyond the horizon (0 for custom clocks
    /// and for `alpha = 0`, where the infinite clock is not finite).
    pub fn tail_mass(&self) -> f64 {
        if !self.geometric || self.alpha == 0.0 {
            return 0.0;
        }
        let r = (-self.alpha * self.dt).exp();
        let next = (-self.alpha * (self.horizon() + 1) as f64 * self.dt).exp() * self.dt;
        next / (1.0 - r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventTree {
    nodes: Vec<Node>,
    clock: Clock,
    n_assets: usize,
}

/// Consumption rate per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumptionPlan {
    pub rates: Vec<f64>,
}

/// Units of each asset held over the following period, per node (empty at
/// terminal nodes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub holdings: Vec<Vec<f64>>,
}

/// Positive node process deflating wealth and consumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deflator {
    pub values: Vec<f64>,
}

impl ConsumptionPlan {
    pub fn zeros(tree: &EventTree) -> Self {
        Self {
            rates: vec![0.0; tree.len()],
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rates: self.rates.iter().map(|c| c * factor).collect(),
        }
    }
}

impl Strategy {
    pub fn zeros(tree: &EventTree) -> Self {
        Self {
            holdings: tree
                .nodes
                .iter()
                .map(|n| {
                    if n.is_terminal() {
                        Vec::new()
                    } else {
                        vec![0.0; tree.n_assets]
                    }
                })
                .collect(),
        }
    }

    pub fn constant(tree: &EventTree, h: &[f64]) -> Self {
        Self {
            holdings: tree
                .nodes
                .iter()
                .map(|n| if n.is_terminal() { Vec::new() } else { h.to_vec() })
                .collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            holdings: self
                .holdings
                .iter()
                .map(|h| h.iter().map(|v| v * factor).collect())
                .collect(),
        }
    }
}

impl Deflator {
    pub fn root(&self) -> f64 {
        self.values[0]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    /// Smallest node index where wealth (or terminal post-consumption
    /// wealth) drops below `-WEALTH_TOL`.
    pub first_violation: Option<usize>,
    pub violations: Vec<usize>,
    pub min_wealth: f64,
}

/// Recombining-labelled, node-expanded tree with i.i.d. multiplicative
/// moves.
#[derive(Debug, Clone, PartialEq)]
pub struct RecombiningSpec {
    pub branching: usize,
    pub periods: usize,
    /// `factors[branch][asset]`.
    pub factors: Vec<Vec<f64>>,
    pub probabilities: Vec<f64>,
    pub initial_prices: Vec<f64>,
    pub alpha: f64,
    pub dt: f64,
    pub node_cap: usize,
}

impl RecombiningSpec {
    /// Single-asset tree started at price 1.
    pub fn single_asset(factors: &[f64], probabilities: &[f64], periods: usize) -> Self {
        Self {
            branching: factors.len(),
            periods,
            factors: factors.iter().map(|f| vec![*f]).collect(),
            probabilities: probabilities.to_vec(),
            initial_prices: vec![1.0],
            alpha: 0.0,
            dt: 1.0,
            node_cap: DEFAULT_NODE_CAP,
        }
    }

    pub fn with_clock(mut self, alpha: f64, dt: f64) -> Self {
        self.alpha = alpha;
        self.dt = dt;
        self
    }
}

impl EventTree {
    /// Builds a tree from parent links; nodes must be listed so that
    /// parents precede children, with node 0 the root.
    pub fn from_parts(
        parents: Vec<Option<usize>>,
        probs: Vec<f64>,
        prices: Vec<Vec<f64>>,
        clock: Clock,
    ) -> Result<Self> {
        let n = parents.len();
        if n == 0 {
            return Err(TreeError::Invalid("empty tree".into()));
        }
        if probs.len() != n || prices.len() != n {
            return Err(TreeError::Shape("parents, probs and prices differ in length".into()));
        }
        if parents[0].is_some() {
            return Err(TreeError::Invalid("node 0 must be the root".into()));
        }
        let n_assets = prices[0].len();
        if n_assets == 0 {
            return Err(TreeError::Invalid("need at least one asset".into()));
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(n);
        for i in 0..n {
            if prices[i].len() != n_assets {
                return Err(TreeError::Shape(format!(
                    "node {i} has {} prices, expected {n_assets}",
                    prices[i].len()
                )));
            }
            if prices[i].iter().any(|p| !(*p > 0.0 && p.is_finite())) {
                return Err(TreeError::Invalid(format!("node {i}: prices must be positive")));
            }
            let (t, path_prob, prob) = match parents[i] {
                None if i == 0 => (0, 1.0, 1.0),
                None => return Err(TreeError::Invalid(format!("node {i}: second root"))),
                Some(p) if p >= i => {
                    return Err(TreeError::Invalid(format!(
                        "node {i}: parent {p} must precede it"
                    )))
                }
                Some(p) => {
                    let q = probs[i];
                    if !(q > 0.0 && q <= 1.0) {
                        return Err(TreeError::Invalid(format!(
                            "node {i}: transition probability {q} not in (0, 1]"
                        )));
                    }
                    (nodes[p].t + 1, nodes[p].path_prob * q, q)
                }
            };
            if let Some(p) = parents[i] {
                nodes[p].children.push(i);
            }
            nodes.push(Node {
                t,
                parent: parents[i],
                children: Vec::new(),
                prob,
                path_prob,
                prices: prices[i].clone(),
            });
        }
        let horizon = clock.horizon();
        for (i, node) in nodes.iter().enumerate() {
            if node.is_terminal() {
                if node.t != horizon {
                    return Err(TreeError::Invalid(format!(
                        "terminal node {i} at t = {} but clock horizon is {horizon}",
                        node.t
                    )));
                }
            } else {
                if node.children.len() < 2 {
                    return Err(TreeError::Invalid(format!(
                        "node {i} has a single child; non-terminal nodes need at least 2"
                    )));
                }
                let total: f64 = node.children.iter().map(|&c| nodes[c].prob).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(TreeError::Invalid(format!(
                        "node {i}: child probabilities sum to {total}"
                    )));
                }
            }
        }
        Ok(Self {
            nodes,
            clock,
            n_assets,
        })
    }

    pub fn recombining(spec: &RecombiningSpec) -> Result<Self> {
        let b = spec.branching;
        if b < 2 {
            return Err(TreeError::Invalid("branching must be at least 2".into()));
        }
        if spec.factors.len() != b || spec.probabilities.len() != b {
            return Err(TreeError::Shape(
                "need one factor vector and one probability per branch".into(),
            ));
        }
        let d = spec.initial_prices.len();
        if spec.factors.iter().any(|f| f.len() != d) {
            return Err(TreeError::Shape("factor vectors must match asset count".into()));
        }
        if spec.factors.iter().flatten().any(|f| !(*f > 0.0)) {
            return Err(TreeError::Invalid("price factors must be positive".into()));
        }
        let total: f64 = spec.probabilities.iter().sum();
        if spec.probabilities.iter().any(|p| !(*p > 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(TreeError::Invalid(format!(
                "probabilities must be positive and sum to 1 (sum = {total})"
            )));
        }
        let mut count: usize = 0;
        let mut level: usize = 1;
        for _ in 0..=spec.periods {
            count = count.saturating_add(level);
            level = level.saturating_mul(b);
        }
        if count > spec.node_cap {
            return Err(TreeError::SizeCap {
                nodes: count,
                cap: spec.node_cap,
            });
        }
        let mut parents = vec![None];
        let mut probs = vec![1.0];
        let mut prices = vec![spec.initial_prices.clone()];
        let mut frontier = vec![0usize];
        for _ in 0..spec.periods {
            let mut next = Vec::with_capacity(frontier.len() * b);
            for &node in &frontier {
                for branch in 0..b {
                    let s: Vec<f64> = prices[node]
                        .iter()
                        .zip(&spec.factors[branch])
                        .map(|(p, f)| p * f)
                        .collect();
                    parents.push(Some(node));
                    probs.push(spec.probabilities[branch]);
                    prices.push(s);
                    next.push(parents.len() - 1);
                }
            }
            frontier = next;
        }
        let clock = Clock::geometric(spec.alpha, spec.dt, spec.periods)?;
        Self::from_parts(parents, probs, prices, clock)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn with_clock(mut self, clock: Clock) -> Result<Self> {
        if clock.horizon() != self.clock.horizon() {
            return Err(TreeError::Invalid(format!(
                "clock horizon {} does not match tree horizon {}",
                clock.horizon(),
                self.clock.horizon()
            )));
        }
        self.clock = clock;
        Ok(self)
    }

    pub fn n_assets(&self) -> usize {
        self.n_assets
    }

    pub fn horizon(&self) -> usize {
        self.clock.horizon()
    }

    pub fn dt(&self) -> f64 {
        self.clock.dt()
    }

    pub fn max_branching(&self) -> usize {
        self.nodes.iter().map(|n| n.children.len()).max().unwrap_or(0)
    }

    pub fn non_terminal(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| !self.nodes[i].is_terminal())
    }

    /// Nodes on the path from the root to `node`, root first.
    pub fn path_to(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Utility weight `kappa_t * P(node)` of a node.
    pub fn node_weight(&self, i: usize) -> f64 {
        self.clock.kappa(self.nodes[i].t) * self.nodes[i].path_prob
    }

    pub fn constraint_rows(&self, node: usize) -> ConstraintRows {
        let n = &self.nodes[node];
        let child_prices: Vec<&[f64]> = n
            .children
            .iter()
            .map(|&c| self.nodes[c].prices.as_slice())
            .collect();
        ConstraintRows::new(&child_prices, &n.prices)
    }

    /// Conditional martingale measures at a non-terminal node.
    pub fn martingale_polytope(&self, node: usize, floor: f64) -> Result<MartingalePolytope> {
        if self.nodes[node].is_terminal() {
            return Err(TreeError::Invalid(format!("node {node} is terminal")));
        }
        let rows = self.constraint_rows(node);
        polytope::build(node, &rows, floor).ok_or(TreeError::NoDeflator { node })
    }

    /// Polytopes of every non-terminal node (`None` at terminal nodes).
    pub fn all_polytopes(&self, floor: f64) -> Result<Vec<Option<MartingalePolytope>>> {
        (0..self.len())
            .map(|i| {
                if self.nodes[i].is_terminal() {
                    Ok(None)
                } else {
                    self.martingale_polytope(i, floor).map(Some)
                }
            })
            .collect()
    }

    /// `true` when every node admits exactly one martingale measure.
    pub fn is_complete(&self, floor: f64) -> Result<bool> {
        for p in self.all_polytopes(floor)?.into_iter().flatten() {
            if !p.is_singleton() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn check_plan(&self, plan: &ConsumptionPlan) -> Result<()> {
        if plan.rates.len() != self.len() {
            return Err(TreeError::Shape(format!(
                "plan has {} entries for {} nodes",
                plan.rates.len(),
                self.len()
            )));
        }
        Ok(())
    }

    fn check_strategy(&self, strategy: &Strategy) -> Result<()> {
        if strategy.holdings.len() != self.len() {
            return Err(TreeError::Shape(format!(
                "strategy has {} entries for {} nodes",
                strategy.holdings.len(),
                self.len()
            )));
        }
        for i in self.non_terminal() {
            if strategy.holdings[i].len() != self.n_assets {
                return Err(TreeError::Shape(format!(
                    "strategy at node {i} holds {} assets, market has {}",
                    strategy.holdings[i].len(),
                    self.n_assets
                )));
            }
        }
        Ok(())
    }

    fn check_deflator(&self, deflator: &Deflator) -> Result<()> {
        if deflator.values.len() != self.len() {
            return Err(TreeError::Shape(format!(
                "deflator has {} entries for {} nodes",
                deflator.values.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// Pre-consumption wealth: `X(root) = x`,
    /// `X(child) = X(node) + H(node).(S(child) - S(node)) - c(node) dt`.
    pub fn wealth_process(
        &self,
        x: f64,
        strategy: &Strategy,
        plan: &ConsumptionPlan,
    ) -> Result<Vec<f64>> {
        self.check_plan(plan)?;
        self.check_strategy(strategy)?;
        let dt = self.dt();
        let mut wealth = vec![0.0; self.len()];
        wealth[0] = x;
        for i in 0..self.len() {
            let node = &self.nodes[i];
            let after = wealth[i] - plan.rates[i] * dt;
            for &c in &node.children {
                let gain: f64 = strategy.holdings[i]
                    .iter()
                    .zip(node.prices.iter().zip(&self.nodes[c].prices))
                    .map(|(h, (s0, s1))| h * (s1 - s0))
                    .sum();
                wealth[c] = after + gain;
            }
        }
        Ok(wealth)
    }

    /// Wealth never below `-WEALTH_TOL`, including terminal wealth left
    /// after the final consumption.
    pub fn is_admissible(
        &self,
        x: f64,
        strategy: &Strategy,
        plan: &ConsumptionPlan,
    ) -> Result<AdmissibilityReport> {
        let wealth = self.wealth_process(x, strategy, plan)?;
        let dt = self.dt();
        let mut violations = Vec::new();
        let mut min_wealth = f64::INFINITY;
        for (i, node) in self.nodes.iter().enumerate() {
            let mut w = wealth[i];
            if node.is_terminal() {
                w = w.min(wealth[i] - plan.rates[i] * dt);
            }
            if plan.rates[i] < 0.0 || w < -WEALTH_TOL {
                violations.push(i);
            }
            min_wealth = min_wealth.min(w);
        }
        Ok(AdmissibilityReport {
            admissible: violations.is_empty(),
            first_violation: violations.first().copied(),
            violations,
            min_wealth,
        })
    }

    /// Maximal one-step drift of `X Y + sum_{s before node} c Y dt`; a value
    /// `<= 0` (up to rounding) certifies the supermartingale property.
    pub fn supermartingale_residual(
        &self,
        deflator: &Deflator,
        x: f64,
        strategy: &Strategy,
        plan: &ConsumptionPlan,
    ) -> Result<f64> {
        self.check_deflator(deflator)?;
        let wealth = self.wealth_process(x, strategy, plan)?;
        let dt = self.dt();
        let y = &deflator.values;
        let mut consumed = vec![0.0; self.len()];
        for i in 0..self.len() {
            for &c in &self.nodes[i].children {
                consumed[c] = consumed[i] + plan.rates[i] * y[i] * dt;
            }
        }
        let g = |i: usize| wealth[i] * y[i] + consumed[i];
        let mut worst = f64::NEG_INFINITY;
        for i in self.non_terminal() {
            let expected: f64 = self.nodes[i]
                .children
                .iter()
                .map(|&c| self.nodes[c].prob * g(c))
                .sum();
            worst = worst.max(expected - g(i));
        }
        Ok(if worst == f64::NEG_INFINITY { 0.0 } else { worst })
    }

    /// `<c, Y> = E[sum_t c_t Y_t dt]`.
    pub fn budget_pairing(&self, plan: &ConsumptionPlan, deflator: &Deflator) -> Result<f64> {
        self.check_plan(plan)?;
        self.check_deflator(deflator)?;
        let dt = self.dt();
        Ok(self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| n.path_prob * plan.rates[i] * deflator.values[i] * dt)
            .sum())
    }

    /// `Z(root) = y`, `Z(child) = Z(node) q(child) / p(child)`; every `q`
    /// must lie in its node's polytope.
    pub fn deflator_from_transitions(
        &self,
        transitions: &[Vec<f64>],
        y: f64,
        floor: f64,
    ) -> Result<Deflator> {
        if transitions.len() != self.len() {
            return Err(TreeError::Shape(format!(
                "{} transition vectors for {} nodes",
                transitions.len(),
                self.len()
            )));
        }
        if !(y > 0.0 && y.is_finite()) {
            return Err(TreeError::Invalid(format!("root value y must be positive, got {y}")));
        }
        let mut z = vec![0.0; self.len()];
        z[0] = y;
        for i in 0..self.len() {
            let node = &self.nodes[i];
            if node.is_terminal() {
                continue;
            }
            let q = &transitions[i];
            if q.len() != node.children.len() {
                return Err(TreeError::InvalidMeasure {
                    node: i,
                    reason: format!("{} weights for {} children", q.len(), node.children.len()),
                });
            }
            if let Some(bad) = q.iter().find(|v| !(**v >= floor - 1e-15)) {
                return Err(TreeError::InvalidMeasure {
                    node: i,
                    reason: format!("weight {bad} below floor {floor}"),
                });
            }
            let mass: f64 = q.iter().sum();
            if (mass - 1.0).abs() > 1e-12 {
                return Err(TreeError::InvalidMeasure {
                    node: i,
                    reason: format!("weights sum to {mass}"),
                });
            }
            let resid = self.constraint_rows(i).residual(q);
            if resid > 1e-10 {
                return Err(TreeError::InvalidMeasure {
                    node: i,
                    reason: format!("prices are not a one-step martingale (residual {resid:e})"),
                });
            }
            for (&c, &qc) in node.children.iter().zip(q) {
                z[c] = z[i] * qc / self.nodes[c].prob;
            }
        }
        Ok(Deflator { values: z })
    }

    /// Conditional transition weights `q(child) = p(child) Z(child) / Z(node)`.
    pub fn transitions_of(&self, deflator: &Deflator) -> Vec<Vec<f64>> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                n.children
                    .iter()
                    .map(|&c| self.nodes[c].prob * deflator.values[c] / deflator.values[i])
                    .collect()
            })
            .collect()
    }

    /// Expectation of a node function at time `t`.
    pub fn expectation_at(&self, t: usize, f: impl Fn(usize) -> f64) -> f64 {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.t == t)
            .map(|(i, n)| n.path_prob * f(i))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn binomial() -> EventTree {
        EventTree::recombining(&RecombiningSpec::single_asset(&[2.0, 0.5], &[0.5, 0.5], 1)).unwrap()
    }

    fn trinomial() -> EventTree {
        EventTree::recombining(&RecombiningSpec::single_asset(
            &[1.5, 1.0, 0.5],
            &[0.3, 0.4, 0.3],
            1,
        ))
        .unwrap()
    }

    #[test]
    fn builder_node_counts() {
        assert_eq!(binomial().len(), 3);
        let t = EventTree::recombining(&RecombiningSpec::single_asset(&[2.0, 0.5], &[0.5, 0.5], 3))
            .unwrap();
        assert_eq!(t.len(), 15);
        let t = EventTree::recombining(&RecombiningSpec::single_asset(
            &[1.2, 1.0, 0.8],
            &[0.3, 0.4, 0.3],
            2,
        ))
        .unwrap();
        assert_eq!(t.len(), 13);
        let mut spec = RecombiningSpec::single_asset(&[2.0, 0.5], &[0.5, 0.5], 10);
        spec.node_cap = 100;
        assert!(matches!(
            EventTree::recombining(&spec),
            Err(TreeError::SizeCap { nodes: 2047, cap: 100 })
        ));
    }

    #[test]
    fn builder_rejects_bad_inputs() {
        assert!(EventTree::recombining(&RecombiningSpec::single_asset(&[2.0, -0.5], &[0.5, 0.5], 1))
            .is_err());
        assert!(EventTree::recombining(&RecombiningSpec::single_asset(&[2.0, 0.5], &[0.6, 0.5], 1))
            .is_err());
        assert!(EventTree::recombining(&RecombiningSpec::single_asset(&[2.0], &[1.0], 1)).is_err());
    }

    #[test]
    fn wealth_examples() {
        let tree = binomial();
        let zero_h = Strategy::zeros(&tree);
        let zero_c = ConsumptionPlan::zeros(&tree);
        assert_eq!(tree.wealth_process(1.0, &zero_h, &zero_c).unwrap(), vec![1.0; 3]);
        let hold = Strategy::constant(&tree, &[1.0]);
        let w = tree.wealth_process(1.0, &hold, &zero_c).unwrap();
        assert_eq!(w, vec![1.0, 2.0, 0.5]);
        let mut eat = zero_c.clone();
        eat.rates[0] = 1.0;
        let w = tree.wealth_process(1.0, &zero_h, &eat).unwrap();
        assert_eq!(&w[1..], &[0.0, 0.0]);
    }

    #[test]
    fn admissibility_examples() {
        let tree = binomial();
        let zero_h = Strategy::zeros(&tree);
        let zero_c = ConsumptionPlan::zeros(&tree);
        assert!(tree.is_admissible(1.0, &zero_h, &zero_c).unwrap().admissible);
        let mut over = zero_c.clone();
        over.rates[0] = 2.0;
        let r = tree.is_admissible(1.0, &zero_h, &over).unwrap();
        assert!(!r.admissible);
        assert_eq!(r.first_violation, Some(1));
        assert_eq!(r.violations, vec![1, 2]);
        let hold = Strategy::constant(&tree, &[1.0]);
        assert!(tree.is_admissible(1.0, &hold, &zero_c).unwrap().admissible);
        // terminal consumption above terminal wealth
        let mut late = zero_c;
        late.rates[2] = 1.5;
        let r = tree.is_admissible(1.0, &hold, &late).unwrap();
        assert_eq!(r.violations, vec![2]);
    }

    #[test]
    fn polytope_examples() {
        let tree = binomial();
        let p = tree.martingale_polytope(0, DEFAULT_Q_MIN).unwrap();
        assert!(p.is_singleton());
        assert_relative_eq!(p.vertices[0][0], 1.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(p.vertices[0][1], 2.0 / 3.0, max_relative = 1e-14);

        let p = trinomial().martingale_polytope(0, DEFAULT_Q_MIN).unwrap();
        assert_eq!(p.dimension(), 1);
        assert_eq!(p.vertices.len(), 2);
        for (a, b) in p.feasible_point.iter().zip([0.25, 0.5, 0.25]) {
            assert!((a - b).abs() < 1e-8);
        }

        let arb = EventTree::recombining(&RecombiningSpec::single_asset(&[2.0, 1.1], &[0.5, 0.5], 1))
            .unwrap();
        assert!(matches!(
            arb.martingale_polytope(0, DEFAULT_Q_MIN),
            Err(TreeError::NoDeflator { node: 0 })
        ));
    }

    #[test]
    fn deflator_examples() {
        let tree = binomial();
        let q = vec![vec![1.0 / 3.0, 2.0 / 3.0], vec![], vec![]];
        let z = tree.deflator_from_transitions(&q, 1.0, DEFAULT_Q_MIN).unwrap();
        assert_relative_eq!(z.values[1], 2.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(z.values[2], 4.0 / 3.0, max_relative = 1e-14);
        let z2 = tree.deflator_from_transitions(&q, 2.0, DEFAULT_Q_MIN).unwrap();
        for (a, b) in z2.values.iter().zip(&z.values) {
            assert_relative_eq!(*a, 2.0 * b, max_relative = 1e-15);
        }
        let bad = vec![vec![0.5, 0.5], vec![], vec![]];
        assert!(matches!(
            tree.deflator_from_transitions(&bad, 1.0, DEFAULT_Q_MIN),
            Err(TreeError::InvalidMeasure { node: 0, .. })
        ));

        // S already a martingale under p: q = p gives the constant deflator
        let mart = EventTree::recombining(&RecombiningSpec::single_asset(
            &[1.5, 0.5],
            &[0.5, 0.5],
            2,
        ))
        .unwrap();
        let q: Vec<Vec<f64>> = mart
            .nodes()
            .iter()
            .map(|n| if n.is_terminal() { vec![] } else { vec![0.5, 0.5] })
            .collect();
        let z = mart.deflator_from_transitions(&q, 1.7, DEFAULT_Q_MIN).unwrap();
        assert!(z.values.iter().all(|v| (*v - 1.7).abs() < 1e-15));
    }

    #[test]
    fn supermartingale_residual_examples() {
        let tree = binomial();
        let q = vec![vec![1.0 / 3.0, 2.0 / 3.0], vec![], vec![]];
        let z = tree.deflator_from_transitions(&q, 1.0, DEFAULT_Q_MIN).unwrap();
        let hold = Strategy::constant(&tree, &[0.7]);
        let mut plan = ConsumptionPlan::zeros(&tree);
        plan.rates[0] = 0.2;
        let r = tree.supermartingale_residual(&z, 1.0, &hold, &plan).unwrap();
        assert!(r.abs() <= 1e-12);

        // Y = 1 with a buy-and-hold position: E[S_1] = 1.25, drift 0.25
        let ones = Deflator { values: vec![1.0; 3] };
        let buy = Strategy::constant(&tree, &[1.0]);
        let r = tree
            .supermartingale_residual(&ones, 1.0, &buy, &ConsumptionPlan::zeros(&tree))
            .unwrap();
        assert_relative_eq!(r, 0.25, max_relative = 1e-14);

        let r = tree
            .supermartingale_residual(&z, 1.0, &Strategy::zeros(&tree), &ConsumptionPlan::zeros(&tree))
            .unwrap();
        assert!(r.abs() <= 1e-12);
    }

    #[test]
    fn budget_examples() {
        let tree = binomial();
        let q = vec![vec![1.0 / 3.0, 2.0 / 3.0], vec![], vec![]];
        let z = tree.deflator_from_transitions(&q, 1.0, DEFAULT_Q_MIN).unwrap();
        assert_eq!(tree.budget_pairing(&ConsumptionPlan::zeros(&tree), &z).unwrap(), 0.0);
        let mut root_only = ConsumptionPlan::zeros(&tree);
        root_only.rates[0] = 1.0;
        assert_eq!(tree.budget_pairing(&root_only, &z).unwrap(), 1.0);

        // consume everything: c_0 = 1/2, then terminal wealth eaten.  With
        // H = 1/3 the terminal wealth is (1/2 + 1/3, 1/2 - 1/6).
        let mut all = ConsumptionPlan::zeros(&tree);
        all.rates = vec![0.5, 0.5 + 1.0 / 3.0, 0.5 - 1.0 / 6.0];
        let h = Strategy::constant(&tree, &[1.0 / 3.0]);
        let rep = tree.is_admissible(1.0, &h, &all).unwrap();
        assert!(rep.admissible);
        assert_relative_eq!(tree.budget_pairing(&all, &z).unwrap(), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn clock_weights() {
        let c = Clock::geometric(0.1, 0.5, 3).unwrap();
        assert_relative_eq!(c.kappa(2), (-0.1f64).exp() * 0.5, max_relative = 1e-15);
        assert_relative_eq!(c.gamma(2), 0.1f64.exp(), max_relative = 1e-15);
        for t in 0..=3 {
            assert_relative_eq!(c.gamma(t) * c.kappa(t), c.dt(), max_relative = 1e-15);
        }
        let geometric_sum: f64 = (4..10_000).map(|t| (-0.05 * t as f64).exp() * 0.5).sum();
        assert_relative_eq!(c.tail_mass(), geometric_sum, max_relative = 1e-10);
        assert!(Clock::geometric(-1.0, 1.0, 1).is_err());
        assert!(Clock::from_weights(1.0, vec![1.0, 0.0]).is_err());
    }
}
