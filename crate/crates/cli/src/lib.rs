//! Config-driven experiment runner behind the `mmot` binary.

pub mod audit;
pub mod config;
pub mod converse;
pub mod pipeline;

use anyhow::{Context, Result};
use mmot_core::solver::DEFAULT_TENSOR_CAP;

pub const TENSOR_CAP_VAR: &str = "MMOT_TENSOR_CAP";
pub const DEMO_CONFIG: &str = include_str!("../configs/demo.json");

/// Cap on `∏ n_i`, from the environment when set.
pub fn tensor_cap() -> Result<usize> {
    match std::env::var(TENSOR_CAP_VAR) {
        Ok(v) => v.trim().parse().with_context(|| format!("{TENSOR_CAP_VAR}={v:?} is not a size")),
        Err(_) => Ok(DEFAULT_TENSOR_CAP),
    }
}
