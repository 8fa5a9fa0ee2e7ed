//! Entropic multi-marginal scaling in the log domain.

use std::sync::Arc;

use serde::Serialize;

use super::{for_each_index, Coupling, CostTensor, SolverError};
use crate::measures::MarginalSystem;

/// A dense plan over all atom tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePlan {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DensePlan {
    /// The independent coupling of the marginals.
    pub fn product(system: &MarginalSystem) -> Self {
        let shape = system.shape();
        let mut values = Vec::with_capacity(shape.iter().product());
        for_each_index(&shape, |_, index| {
            values.push(system.measures().iter().zip(index).map(|(m, &k)| m.weights()[k]).product());
        });
        Self { shape, values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.shape.iter().map(|&n| vec![0.0; n]).collect();
        for_each_index(&self.shape, |flat, index| {
            for (i, &k) in index.iter().enumerate() {
                out[i][k] += self.values[flat];
            }
        });
        out
    }

    /// Largest per-marginal L1 error.
    pub fn marginal_error(&self, system: &MarginalSystem) -> f64 {
        self.marginals()
            .iter()
            .zip(system.measures())
            .map(|(got, m)| got.iter().zip(m.weights()).map(|(g, w)| (g - w).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn objective(&self, tensor: &CostTensor) -> f64 {
        self.values.iter().zip(tensor.values()).map(|(p, c)| p * c).sum()
    }

    pub fn max_deviation(&self, other: &DensePlan) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Sparse coupling of the entries above `threshold`; fails unless the
    /// result still meets the marginal tolerance.
    pub fn to_coupling(&self, system: Arc<MarginalSystem>, threshold: f64) -> Result<Coupling, SolverError> {
        let mut entries = Vec::new();
        for_each_index(&self.shape, |flat, index| {
            if self.values[flat] > threshold {
                entries.push((index.to_vec(), self.values[flat]));
            }
        });
        Coupling::new(system, entries)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropicReport {
    pub converged: bool,
    pub iterations: usize,
    pub marginal_error: f64,
    pub objective: f64,
    pub epsilon: f64,
    pub tol: f64,
}

/// Sinkhorn-type scaling for `min ⟨C, P⟩ − ε H(P)` over couplings.
///
/// One iteration updates every potential once. The loop stops when all
/// marginal L1 errors are below `tol`, or after `max_iter` iterations;
/// the report says which.
pub fn solve_entropic(
    tensor: &CostTensor,
    system: &MarginalSystem,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<(DensePlan, EntropicReport), SolverError> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(SolverError::Epsilon(epsilon));
    }
    tensor.check_system(system)?;
    let shape = system.shape();
    let log_weights: Vec<Vec<f64>> =
        system.measures().iter().map(|m| m.weights().iter().map(|w| w.ln()).collect()).collect();
    let mut f: Vec<Vec<f64>> = shape.iter().map(|&n| vec![0.0; n]).collect();
    let costs = tensor.values();

    let mut iterations = 0;
    let mut plan = DensePlan { shape: shape.clone(), values: vec![0.0; costs.len()] };
    let mut error = f64::INFINITY;
    while iterations < max_iter {
        iterations += 1;
        for i in 0..shape.len() {
            let mut peak = vec![f64::NEG_INFINITY; shape[i]];
            let exponent = |index: &[usize], flat: usize, f: &[Vec<f64>]| {
                let others: f64 = f.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, fj)| fj[index[j]]).sum();
                (others - costs[flat]) / epsilon
            };
            for_each_index(&shape, |flat, index| {
                let s = exponent(index, flat, &f);
                peak[index[i]] = peak[index[i]].max(s);
            });
            let mut sums = vec![0.0; shape[i]];
            for_each_index(&shape, |flat, index| {
                let k = index[i];
                if peak[k].is_finite() {
                    sums[k] += (exponent(index, flat, &f) - peak[k]).exp();
                }
            });
            for k in 0..shape[i] {
                let lse = peak[k] + sums[k].ln();
                f[i][k] = if lse.is_finite() { epsilon * (log_weights[i][k] - lse) } else { f64::NEG_INFINITY };
            }
        }
        for_each_index(&shape, |flat, index| {
            let total: f64 = f.iter().zip(index).map(|(fi, &k)| fi[k]).sum();
            plan.values[flat] = ((total - costs[flat]) / epsilon).exp();
        });
        error = plan.marginal_error(system);
        if error < tol {
            break;
        }
    }
    let report = EntropicReport {
        converged: error < tol,
        iterations,
        marginal_error: error,
        objective: plan.objective(tensor),
        epsilon,
        tol,
    };
    Ok((plan, report))
}
