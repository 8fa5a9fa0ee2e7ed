//! Empirical uniqueness of the optimal plan.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::simplex::{LpOptions, PivotOrder, Simplex};
use super::{Coupling, CostTensor, SolverError};
use crate::measures::MarginalSystem;

/// Relative size of the cost perturbations.
pub const DEFAULT_PROBE_MAGNITUDE: f64 = 1e-9;
/// Adjacent optima explored from the baseline vertex.
const ADJACENT_LIMIT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeVerdict {
    Unique,
    NonUnique,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub verdict: ProbeVerdict,
    pub trials: usize,
    pub magnitude: f64,
    pub optimum: f64,
    /// Distinct supports seen across all re-solves, baseline included.
    pub distinct_supports: usize,
    /// Two optimal plans with different supports when non-unique.
    pub witnesses: Vec<Coupling>,
    /// Re-solves whose support differed but whose plan was not optimal for
    /// the unperturbed costs.
    pub suboptimal_alternatives: usize,
}

fn support_of(entries: &[(Vec<usize>, f64)]) -> Vec<Vec<usize>> {
    entries.iter().map(|(a, _)| a.clone()).collect()
}

/// Re-solve under seeded perturbations `C + magnitude · max(1, max|C|) · ξ`,
/// `ξ ~ U[−1, 1]`, alternating pivot orders, and also pivot along every
/// zero reduced cost edge of the baseline vertex. Two plans with different
/// supports that are both optimal for the unperturbed costs (within
/// `1e-7 (1 + |opt|)`) make the verdict non-unique. If every support agrees
/// it is unique, and otherwise inconclusive.
pub fn uniqueness_probe(
    tensor: &CostTensor,
    system: &MarginalSystem,
    trials: usize,
    magnitude: f64,
    seed: u64,
) -> Result<ProbeReport, SolverError> {
    if trials < 2 {
        return Err(SolverError::Trials(trials));
    }
    tensor.check_system(system)?;
    let shared = Arc::new(system.clone());
    let mut baseline = Simplex::run(tensor.values(), system, LpOptions::default())?;
    let base_entries = baseline.vertex();
    let base_coupling = Coupling::new(shared.clone(), base_entries.clone())?;
    let optimum = base_coupling.cost(tensor);
    let slack = 1e-7 * (1.0 + optimum.abs());

    let mut candidates = baseline.adjacent_optima(ADJACENT_LIMIT);
    let scale = magnitude * tensor.max_abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reverse = Simplex::run(tensor.values(), system, LpOptions { order: PivotOrder::Reverse, ..LpOptions::default() })?;
    candidates.push(reverse.vertex());
    for t in 0..trials {
        let perturbed: Vec<f64> = tensor.values().iter().map(|c| c + scale * rng.gen_range(-1.0..=1.0)).collect();
        let order = if t % 2 == 0 { PivotOrder::Forward } else { PivotOrder::Reverse };
        let run = Simplex::run(&perturbed, system, LpOptions { order, ..LpOptions::default() })?;
        candidates.push(run.vertex());
    }

    let base_support = support_of(&base_entries);
    let mut supports = vec![base_support.clone()];
    let mut witness = None;
    let mut suboptimal = 0;
    for entries in candidates {
        let support = support_of(&entries);
        if !supports.contains(&support) {
            supports.push(support.clone());
        }
        if support == base_support {
            continue;
        }
        let coupling = Coupling::new(shared.clone(), entries)?;
        if coupling.cost(tensor) <= optimum + slack {
            witness.get_or_insert(coupling);
        } else {
            suboptimal += 1;
        }
    }
    let (verdict, witnesses) = match witness {
        Some(other) => (ProbeVerdict::NonUnique, vec![base_coupling, other]),
        None if supports.len() == 1 => (ProbeVerdict::Unique, Vec::new()),
        None => (ProbeVerdict::Inconclusive, Vec::new()),
    };
    Ok(ProbeReport {
        verdict,
        trials,
        magnitude,
        optimum,
        distinct_supports: supports.len(),
        witnesses,
        suboptimal_alternatives: suboptimal,
    })
}
