//! Exact discrete multi-marginal optimal transport.
//!
//! Solve `min ∫ c dγ` over couplings of finitely supported marginals by a
//! revised simplex on the transport polytope, recover splitting potentials,
//! and audit the structure of optimal supports: splitting, c-cyclical
//! monotonicity, twist, graph structure and uniqueness.

pub mod costs;
pub mod measures;
pub mod monotonicity;
pub mod numdiff;
pub mod solver;
pub mod twistcheck;
