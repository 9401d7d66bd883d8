//! JSON serialization of event trees: a node array `{id, t, parent, prob,
//! prices}` and a clock block `{alpha, dt, T}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Clock, EventTree, Result, TreeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub t: usize,
    pub parent: Option<usize>,
    pub prob: f64,
    pub prices: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockRecord {
    #[serde(default)]
    pub alpha: f64,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    /// Explicit per-time weights; absent for the geometric clock.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFile {
    pub nodes: Vec<NodeRecord>,
    pub clock: ClockRecord,
}

impl TreeFile {
    pub fn into_tree(self) -> Result<EventTree> {
        let mut records = self.nodes;
        records.sort_by_key(|r| r.id);
        for (i, r) in records.iter().enumerate() {
            if r.id != i {
                return Err(TreeError::Invalid(format!(
                    "node ids must be 0..{} without gaps; found id {} at position {i}",
                    records.len(),
                    r.id
                )));
            }
        }
        let clock = match self.clock.kappa {
            Some(k) => {
                if k.len() != self.clock.horizon + 1 {
                    return Err(TreeError::Invalid(format!(
                        "clock has {} weights for horizon {}",
                        k.len(),
                        self.clock.horizon
                    )));
                }
                Clock::from_weights(self.clock.dt, k)?
            }
            None => Clock::geometric(self.clock.alpha, self.clock.dt, self.clock.horizon)?,
        };
        let parents = records.iter().map(|r| r.parent).collect();
        let probs = records.iter().map(|r| r.prob).collect();
        let prices = records.iter().map(|r| r.prices.clone()).collect();
        let tree = EventTree::from_parts(parents, probs, prices, clock)?;
        for (r, n) in records.iter().zip(tree.nodes()) {
            if r.t != n.t {
                return Err(TreeError::Invalid(format!(
                    "node {}: declared t = {} but depth is {}",
                    r.id, r.t, n.t
                )));
            }
        }
        Ok(tree)
    }
}

impl From<&EventTree> for TreeFile {
    fn from(tree: &EventTree) -> Self {
        let clock = tree.clock();
        TreeFile {
            nodes: tree
                .nodes()
                .iter()
                .enumerate()
                .map(|(i, n)| NodeRecord {
                    id: i,
                    t: n.t,
                    parent: n.parent,
                    prob: n.prob,
                    prices: n.prices.clone(),
                })
                .collect(),
            clock: ClockRecord {
                alpha: clock.alpha(),
                dt: clock.dt(),
                horizon: clock.horizon(),
                kappa: if clock.is_geometric() {
                    None
                } else {
                    Some(clock.kappas().to_vec())
                },
            },
        }
    }
}

impl EventTree {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: TreeFile =
            serde_json::from_str(text).map_err(|e| TreeError::Io(format!("parse: {e}")))?;
        file.into_tree()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TreeFile::from(self)).expect("tree serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| TreeError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json())
            .map_err(|e| TreeError::Io(format!("{}: {e}", path.display())))
    }
}
