//! Numerical laboratory for perpetual-consumption duality.
//!
//! * [`utility`]: utility functions, conjugates and well-posedness checks.
//! * [`tree`]: finite event-tree markets, wealth, deflators, budget pairings.
//! * [`duality`]: primal and dual solvers on trees and the duality report.
//! * [`superhedge`]: smallest dominating wealth and optional decomposition.
//! * [`bessel`]: Monte Carlo lab for a stock driven by a 3D Bessel process.

pub mod bessel;
pub mod duality;
pub mod superhedge;
pub mod tree;
pub mod utility;

pub use tree::{ConsumptionPlan, Deflator, EventTree, Strategy};
pub use utility::UtilitySpec;
