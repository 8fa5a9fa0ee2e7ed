//! Discrete Kantorovich problem: cost tensors, couplings, potentials, and the
//! exact and entropic solvers.

mod entropic;
mod probe;
mod simplex;

use std::io;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::costs::{read_tensor_file, write_tensor_file};
use crate::costs::{CostError, CostFunction};
use crate::measures::MarginalSystem;

pub use entropic::{solve_entropic, DensePlan, EntropicReport};
pub use probe::{uniqueness_probe, ProbeReport, ProbeVerdict, DEFAULT_PROBE_MAGNITUDE};
pub use simplex::{solve_exact_lp, solve_exact_lp_with, LpOptions, PivotOrder};

/// Default cap on `∏ n_i` for dense tensors.
pub const DEFAULT_TENSOR_CAP: usize = 10_000_000;
/// Marginal residual tolerated by [`Coupling::new`].
pub const MARGINAL_TOL: f64 = 1e-9;
/// Masses at or below this are treated as zero in vertex solutions.
pub const MASS_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("tensor size {size} exceeds the cap {cap}")]
    TensorCap { size: usize, cap: usize },
    #[error("tensor shape {tensor:?} does not match marginal shape {system:?}")]
    ShapeMismatch { tensor: Vec<usize>, system: Vec<usize> },
    #[error("tensor needs {expected} finite values, got {got}")]
    TensorValues { expected: usize, got: usize },
    #[error("coupling entry {index:?}: {reason}")]
    BadEntry { index: Vec<usize>, reason: String },
    #[error("marginal {marginal} atom {atom} has mass {got}, expected {expected}")]
    Marginal { marginal: usize, atom: usize, got: f64, expected: f64 },
    #[error("potentials do not match the marginal shape")]
    PotentialShape,
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("uniqueness probe needs at least 2 trials, got {0}")]
    Trials(usize),
    #[error("simplex failure: {0}")]
    Internal(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("export failed: {0}")]
    Export(String),
}

/// Dense cost values on all atom tuples, last index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl CostTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, SolverError> {
        let size = checked_size(&shape, usize::MAX)?;
        if values.len() != size || values.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::TensorValues { expected: size, got: values.len() });
        }
        Ok(Self { shape, values })
    }

    /// Read a tensor from the binary table format.
    pub fn from_file(path: &Path) -> Result<Self, SolverError> {
        let (shape, values) = read_tensor_file(path)?;
        Self::new(shape, values)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), SolverError> {
        Ok(write_tensor_file(path, &self.shape, &self.values)?)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.values[flatten(&self.shape, index)]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    fn check_system(&self, system: &MarginalSystem) -> Result<(), SolverError> {
        let shape = system.shape();
        if shape != self.shape {
            return Err(SolverError::ShapeMismatch { tensor: self.shape.clone(), system: shape });
        }
        Ok(())
    }
}

fn checked_size(shape: &[usize], cap: usize) -> Result<usize, SolverError> {
    let size = shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or(SolverError::TensorCap { size: usize::MAX, cap })?;
    if size > cap {
        return Err(SolverError::TensorCap { size, cap });
    }
    Ok(size)
}

pub(crate) fn flatten(shape: &[usize], index: &[usize]) -> usize {
    index.iter().zip(shape).fold(0, |acc, (&k, &n)| acc * n + k)
}

pub(crate) fn unflatten(shape: &[usize], mut flat: usize, out: &mut [usize]) {
    for (slot, &n) in out.iter_mut().zip(shape).rev() {
        *slot = flat % n;
        flat /= n;
    }
}

/// Iterator over all index tuples of `shape` in row-major order.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let size: usize = shape.iter().product();
    let mut index = vec![0; shape.len()];
    for flat in 0..size {
        f(flat, &index);
        for k in (0..shape.len()).rev() {
            index[k] += 1;
            if index[k] < shape[k] {
                break;
            }
            index[k] = 0;
        }
    }
}

/// Evaluate `c` on every atom tuple, refusing tensors above [`DEFAULT_TENSOR_CAP`].
pub fn build_cost_tensor(system: &MarginalSystem, cost: &CostFunction) -> Result<CostTensor, SolverError> {
    build_cost_tensor_capped(system, cost, DEFAULT_TENSOR_CAP)
}

pub fn build_cost_tensor_capped(
    system: &MarginalSystem,
    cost: &CostFunction,
    cap: usize,
) -> Result<CostTensor, SolverError> {
    if cost.arity() != system.arity() {
        return Err(CostError::Arity { expected: cost.arity(), got: system.arity() }.into());
    }
    let shape = system.shape();
    let size = checked_size(&shape, cap)?;
    let first = system.point(&vec![0; shape.len()]);
    cost.eval(&first)?;
    let mut values = Vec::with_capacity(size);
    let mut failure = None;
    for_each_index(&shape, |_, index| {
        if failure.is_some() {
            return;
        }
        match cost.eval_unchecked(&system.point(index)) {
            Ok(v) if v.is_finite() => values.push(v),
            Ok(v) => failure = Some(CostError::Parameter(format!("cost is {v} at {index:?}"))),
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e.into());
    }
    CostTensor::new(shape, values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Entry {
    pub index: Vec<usize>,
    pub mass: f64,
}

/// Sparse transport plan with validated marginals.
#[derive(Debug, Clone, Serialize)]
pub struct Coupling {
    #[serde(skip)]
    system: Arc<MarginalSystem>,
    entries: Vec<Entry>,
}

impl PartialEq for Coupling {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries && *self.system == *other.system
    }
}

impl Coupling {
    /// Entries are sorted by index tuple. Masses must be positive, tuples
    /// unique, and every marginal matched within [`MARGINAL_TOL`].
    pub fn new(system: Arc<MarginalSystem>, entries: Vec<(Vec<usize>, f64)>) -> Result<Self, SolverError> {
        let shape = system.shape();
        let mut entries: Vec<Entry> = entries.into_iter().map(|(index, mass)| Entry { index, mass }).collect();
        for e in &entries {
            if e.index.len() != shape.len() || e.index.iter().zip(&shape).any(|(&k, &n)| k >= n) {
                return Err(SolverError::BadEntry { index: e.index.clone(), reason: "index out of range".into() });
            }
            if !(e.mass > 0.0) || !e.mass.is_finite() {
                return Err(SolverError::BadEntry { index: e.index.clone(), reason: format!("mass {}", e.mass) });
            }
        }
        entries.sort_by(|a, b| a.index.cmp(&b.index));
        if let Some(w) = entries.windows(2).find(|w| w[0].index == w[1].index) {
            return Err(SolverError::BadEntry { index: w[0].index.clone(), reason: "duplicate tuple".into() });
        }
        let coupling = Self { system, entries };
        let marginals = coupling.marginals();
        for (i, (got, measure)) in marginals.iter().zip(coupling.system.measures()).enumerate() {
            for (atom, (&g, &w)) in got.iter().zip(measure.weights()).enumerate() {
                if (g - w).abs() > MARGINAL_TOL {
                    return Err(SolverError::Marginal { marginal: i, atom, got: g, expected: w });
                }
            }
        }
        Ok(coupling)
    }

    /// The independent coupling `μ_1 ⊗ … ⊗ μ_m`.
    pub fn product(system: Arc<MarginalSystem>) -> Result<Self, SolverError> {
        let shape = system.shape();
        let mut entries = Vec::new();
        for_each_index(&shape, |_, index| {
            let mass: f64 = system.measures().iter().zip(index).map(|(m, &k)| m.weights()[k]).product();
            if mass > 0.0 {
                entries.push((index.to_vec(), mass));
            }
        });
        Self::new(system, entries)
    }

    pub fn system(&self) -> &Arc<MarginalSystem> {
        &self.system
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index tuples carrying mass.
    pub fn support(&self) -> Vec<Vec<usize>> {
        self.entries.iter().map(|e| e.index.clone()).collect()
    }

    /// Coordinates of the support tuples.
    pub fn support_points(&self) -> Vec<Vec<Vec<f64>>> {
        self.entries
            .iter()
            .map(|e| self.system.point(&e.index).into_iter().map(<[f64]>::to_vec).collect())
            .collect()
    }

    /// Coordinate projections of the plan.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.system.shape().iter().map(|&n| vec![0.0; n]).collect();
        for e in &self.entries {
            for (i, &k) in e.index.iter().enumerate() {
                out[i][k] += e.mass;
            }
        }
        out
    }

    /// Largest absolute marginal error.
    pub fn marginal_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (got, measure) in self.marginals().iter().zip(self.system.measures()) {
            for (g, w) in got.iter().zip(measure.weights()) {
                worst = worst.max((g - w).abs());
            }
        }
        worst
    }

    pub fn cost(&self, tensor: &CostTensor) -> f64 {
        self.entries.iter().map(|e| e.mass * tensor.get(&e.index)).sum()
    }

    /// CSV with columns `i_1, …, i_m, mass`.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), SolverError> {
        let export = |e: csv::Error| SolverError::Export(e.to_string());
        let mut out = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.system.arity()).map(|i| format!("i_{i}")).collect();
        header.push("mass".into());
        out.write_record(&header).map_err(export)?;
        for e in &self.entries {
            let mut row: Vec<String> = e.index.iter().map(usize::to_string).collect();
            row.push(format!("{:e}", e.mass));
            out.write_record(&row).map_err(export)?;
        }
        out.flush().map_err(|e| SolverError::Export(e.to_string()))
    }
}

/// How potentials were normalized. LP duals are unique only up to shifts
/// summing to zero, so `u_i[0] = 0` for every `i ≥ 2` and `u_1` absorbs them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Anchor {
    pub pinned: Vec<(usize, usize)>,
    pub absorbed_by: usize,
}

impl Anchor {
    pub fn standard(m: usize) -> Self {
        Self { pinned: (1..m).map(|i| (i, 0)).collect(), absorbed_by: 0 }
    }
}

/// Discrete splitting functions, one value per atom of each marginal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplittingPotentials {
    pub u: Vec<Vec<f64>>,
    pub anchor: Anchor,
}

impl SplittingPotentials {
    pub fn new(u: Vec<Vec<f64>>) -> Self {
        let anchor = Anchor::standard(u.len());
        Self { u, anchor }
    }

    /// Shift so `u_i[0] = 0` for `i ≥ 2`, moving the shifts into `u_1`.
    pub fn normalized(mut self) -> Self {
        let mut total = 0.0;
        for u in self.u.iter_mut().skip(1) {
            let s = u[0];
            u.iter_mut().for_each(|v| *v -= s);
            total += s;
        }
        self.u[0].iter_mut().for_each(|v| *v += total);
        self.anchor = Anchor::standard(self.u.len());
        self
    }

    pub fn check_shape(&self, shape: &[usize]) -> Result<(), SolverError> {
        if self.u.len() != shape.len() || self.u.iter().zip(shape).any(|(u, &n)| u.len() != n) {
            return Err(SolverError::PotentialShape);
        }
        Ok(())
    }

    pub fn sum_at(&self, index: &[usize]) -> f64 {
        self.u.iter().zip(index).map(|(u, &k)| u[k]).sum()
    }

    /// `Σ_i Σ_k u_i[k] μ_i[k]`.
    pub fn dual_objective(&self, system: &MarginalSystem) -> f64 {
        self.u
            .iter()
            .zip(system.measures())
            .map(|(u, m)| u.iter().zip(m.weights()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    /// Largest `Σ_i u_i[a_i] − c[a]` over all tuples (≤ 0 when feasible).
    pub fn max_violation(&self, tensor: &CostTensor) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for_each_index(tensor.shape(), |flat, index| {
            worst = worst.max(self.sum_at(index) - tensor.values[flat]);
        });
        worst
    }

    /// Largest `|Σ_i u_i[a_i] − c[a]|` over the given tuples.
    pub fn equality_residual(&self, tensor: &CostTensor, support: &[Vec<usize>]) -> f64 {
        support.iter().map(|a| (self.sum_at(a) - tensor.get(a)).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Iterations {
    pub pivots: usize,
    pub degenerate_pivots: usize,
    pub refactorizations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Degeneracy {
    /// Basic variables at (numerically) zero.
    pub degenerate_basics: usize,
    /// Nonbasic columns with zero reduced cost.
    pub zero_reduced_costs: usize,
}

impl Degeneracy {
    pub fn primal(&self) -> bool {
        self.degenerate_basics > 0
    }

    pub fn dual(&self) -> bool {
        self.zero_reduced_costs > 0
    }
}

/// Outcome of an exact solve.
#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub coupling: Coupling,
    pub potentials: SplittingPotentials,
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub iterations: Iterations,
    pub degeneracy: Degeneracy,
    pub pivot_order: PivotOrder,
    /// `Σ n_i − m + 1`, the largest possible vertex support.
    pub vertex_bound: usize,
    /// `max Σu − c`, nonpositive up to round-off.
    pub dual_violation: f64,
}

impl SolveReport {
    pub fn gap_ok(&self) -> bool {
        self.gap >= -1e-9 && self.gap <= 1e-7 * (1.0 + self.primal.abs())
    }

    pub fn to_json(&self) -> Result<String, SolverError> {
        serde_json::to_string_pretty(self).map_err(|e| SolverError::Export(e.to_string()))
    }
}

#[cfg(test)]
mod tests;
