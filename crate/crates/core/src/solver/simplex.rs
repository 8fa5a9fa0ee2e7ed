//! Revised simplex on the transport polytope.
//!
//! Rows are the marginal constraints `Σ_{a: a_i = k} γ[a] = μ_i[k]`. The
//! system has `m − 1` redundant rows; dropping row `(i, 0)` for every `i ≥ 2`
//! leaves `R = Σ n_i − m + 1` independent rows, and the duals of the kept rows
//! are exactly the potentials with the anchoring `u_i[0] = 0` for `i ≥ 2`.
//!
//! The start is a multi-dimensional northwest corner, which is triangular and
//! hence a basis. Pricing is Bland's rule over a fixed column order, with ties
//! in the ratio test broken by the same order, so a solve is a deterministic
//! function of its inputs and of [`PivotOrder`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    flatten, unflatten, Coupling, CostTensor, Degeneracy, Iterations, SolveReport, SolverError,
    SplittingPotentials, MASS_EPS,
};
use crate::measures::MarginalSystem;

const PIVOT_TOL: f64 = 1e-12;
const DUAL_DEGENERATE_TOL: f64 = 1e-9;
const RATIO_TIE: f64 = 1e-14;

/// Column scan direction for entering and leaving choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PivotOrder {
    #[default]
    Forward,
    Reverse,
}

impl PivotOrder {
    fn prefers(self, a: usize, b: usize) -> bool {
        match self {
            PivotOrder::Forward => a < b,
            PivotOrder::Reverse => a > b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpOptions {
    pub order: PivotOrder,
    /// Pivots between fresh factorizations of the basis.
    pub refactor_every: usize,
    /// Hard stop; `None` picks a bound from the problem size.
    pub max_pivots: Option<usize>,
}

impl Default for LpOptions {
    fn default() -> Self {
        Self { order: PivotOrder::Forward, refactor_every: 64, max_pivots: None }
    }
}

struct Layout {
    shape: Vec<usize>,
    offsets: Vec<usize>,
    rows: usize,
}

impl Layout {
    fn new(shape: &[usize]) -> Self {
        let mut offsets = vec![0; shape.len()];
        let mut next = shape[0];
        for i in 1..shape.len() {
            offsets[i] = next;
            next += shape[i] - 1;
        }
        Self { shape: shape.to_vec(), offsets, rows: next }
    }

    fn row(&self, i: usize, k: usize) -> Option<usize> {
        match (i, k) {
            (0, k) => Some(k),
            (_, 0) => None,
            (i, k) => Some(self.offsets[i] + k - 1),
        }
    }

    fn column_rows(&self, flat: usize, scratch: &mut [usize], out: &mut Vec<usize>) {
        unflatten(&self.shape, flat, scratch);
        out.clear();
        out.extend(scratch.iter().enumerate().filter_map(|(i, &k)| self.row(i, k)));
    }

    fn rhs(&self, system: &MarginalSystem) -> DVector<f64> {
        let mut b = DVector::zeros(self.rows);
        for (i, measure) in system.measures().iter().enumerate() {
            for (k, &w) in measure.weights().iter().enumerate() {
                if let Some(r) = self.row(i, k) {
                    b[r] = w;
                }
            }
        }
        b
    }

    fn potentials(&self, y: &DVector<f64>) -> SplittingPotentials {
        let u = self
            .shape
            .iter()
            .enumerate()
            .map(|(i, &n)| (0..n).map(|k| self.row(i, k).map_or(0.0, |r| y[r])).collect())
            .collect();
        SplittingPotentials::new(u)
    }
}

/// Northwest corner: advance one index per step, always the non-exhausted
/// marginal with the least remaining mass at its current atom.
fn northwest_corner(system: &MarginalSystem) -> Vec<usize> {
    let shape = system.shape();
    let m = shape.len();
    let weights: Vec<&[f64]> = system.measures().iter().map(|mu| mu.weights()).collect();
    let mut k = vec![0; m];
    let mut rest: Vec<f64> = weights.iter().map(|w| w[0]).collect();
    let mut columns = vec![flatten(&shape, &k)];
    while let Some(i) = (0..m)
        .filter(|&i| k[i] + 1 < shape[i])
        .min_by(|&a, &b| rest[a].total_cmp(&rest[b]))
    {
        let t = rest[i];
        for r in rest.iter_mut() {
            *r = (*r - t).max(0.0);
        }
        k[i] += 1;
        rest[i] = weights[i][k[i]];
        columns.push(flatten(&shape, &k));
    }
    columns
}

pub(crate) struct Simplex<'a> {
    layout: Layout,
    costs: &'a [f64],
    b: DVector<f64>,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    binv: DMatrix<f64>,
    x: Vec<f64>,
    order: PivotOrder,
    stats: Iterations,
    since_refactor: usize,
    refactor_every: usize,
    price_tol: f64,
    scratch: Vec<usize>,
    rows: Vec<usize>,
}

impl<'a> Simplex<'a> {
    pub(crate) fn run(
        costs: &'a [f64],
        system: &MarginalSystem,
        options: LpOptions,
    ) -> Result<Self, SolverError> {
        let shape = system.shape();
        let layout = Layout::new(&shape);
        let basis = northwest_corner(system);
        debug_assert_eq!(basis.len(), layout.rows);
        let mut is_basic = vec![false; costs.len()];
        for &col in &basis {
            is_basic[col] = true;
        }
        let max_abs = costs.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let rows = layout.rows;
        let mut simplex = Self {
            b: layout.rhs(system),
            layout,
            costs,
            basis,
            is_basic,
            binv: DMatrix::zeros(rows, rows),
            x: vec![0.0; rows],
            order: options.order,
            stats: Iterations::default(),
            since_refactor: 0,
            refactor_every: options.refactor_every.max(1),
            price_tol: 1e-11 * (1.0 + max_abs),
            scratch: vec![0; shape.len()],
            rows: Vec::with_capacity(shape.len()),
        };
        simplex.refactor()?;
        let limit = options.max_pivots.unwrap_or(50 * (costs.len() + rows) + 10_000);
        loop {
            let y = simplex.duals();
            match simplex.entering(&y) {
                Some(col) => {
                    if simplex.stats.pivots >= limit {
                        return Err(SolverError::Internal(format!(
                            "no optimum after {limit} pivots (rows {rows}, columns {})",
                            costs.len()
                        )));
                    }
                    let w = simplex.direction(col);
                    let r = simplex.leaving(&w).ok_or_else(|| {
                        SolverError::Internal(format!("column {col} has no positive pivot entry"))
                    })?;
                    simplex.pivot(col, r, &w)?;
                }
                None if simplex.since_refactor > 0 => simplex.refactor()?,
                None => break,
            }
        }
        Ok(simplex)
    }

    fn refactor(&mut self) -> Result<(), SolverError> {
        let n = self.layout.rows;
        let mut basis_matrix = DMatrix::<f64>::zeros(n, n);
        for (pos, &col) in self.basis.iter().enumerate() {
            self.layout.column_rows(col, &mut self.scratch, &mut self.rows);
            for &r in &self.rows {
                basis_matrix[(r, pos)] = 1.0;
            }
        }
        self.binv = basis_matrix
            .try_inverse()
            .ok_or_else(|| SolverError::Internal("basis matrix became singular".into()))?;
        let x = &self.binv * &self.b;
        for (slot, &v) in self.x.iter_mut().zip(x.iter()) {
            if v < -1e-9 {
                return Err(SolverError::Internal(format!("basic variable {v} lost feasibility")));
            }
            *slot = v.max(0.0);
        }
        self.stats.refactorizations += 1;
        self.since_refactor = 0;
        Ok(())
    }

    /// `y^T = c_B^T B^{-1}`.
    fn duals(&self) -> DVector<f64> {
        let cb = DVector::from_iterator(self.basis.len(), self.basis.iter().map(|&c| self.costs[c]));
        self.binv.tr_mul(&cb)
    }

    fn reduced_cost(&mut self, col: usize, y: &DVector<f64>) -> f64 {
        self.layout.column_rows(col, &mut self.scratch, &mut self.rows);
        self.costs[col] - self.rows.iter().map(|&r| y[r]).sum::<f64>()
    }

    fn entering(&mut self, y: &DVector<f64>) -> Option<usize> {
        let n = self.costs.len();
        let pick = |s: &mut Self, col: usize| !s.is_basic[col] && s.reduced_cost(col, y) < -s.price_tol;
        match self.order {
            PivotOrder::Forward => (0..n).find(|&c| pick(self, c)),
            PivotOrder::Reverse => (0..n).rev().find(|&c| pick(self, c)),
        }
    }

    /// `B^{-1} A_col`.
    fn direction(&mut self, col: usize) -> Vec<f64> {
        self.layout.column_rows(col, &mut self.scratch, &mut self.rows);
        let mut w = vec![0.0; self.layout.rows];
        for &r in &self.rows {
            for (slot, v) in w.iter_mut().zip(self.binv.column(r).iter()) {
                *slot += v;
            }
        }
        w
    }

    fn leaving(&self, w: &[f64]) -> Option<usize> {
        let ratio = |r: usize| self.x[r] / w[r];
        let eligible = || (0..w.len()).filter(|&r| w[r] > PIVOT_TOL);
        let best = eligible().map(ratio).fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            return None;
        }
        let tie = best + RATIO_TIE * best.max(1.0);
        eligible()
            .filter(|&r| ratio(r) <= tie)
            .reduce(|a, b| if self.order.prefers(self.basis[b], self.basis[a]) { b } else { a })
    }

    fn pivot(&mut self, col: usize, r: usize, w: &[f64]) -> Result<(), SolverError> {
        let theta = self.x[r] / w[r];
        for (i, xi) in self.x.iter_mut().enumerate() {
            if i != r {
                *xi = (*xi - theta * w[i]).max(0.0);
            }
        }
        self.x[r] = theta;
        let pivot_row = self.binv.row(r) / w[r];
        for (i, &wi) in w.iter().enumerate() {
            if i == r {
                self.binv.set_row(r, &pivot_row);
            } else if wi != 0.0 {
                let updated = self.binv.row(i) - &pivot_row * wi;
                self.binv.set_row(i, &updated);
            }
        }
        self.is_basic[self.basis[r]] = false;
        self.is_basic[col] = true;
        self.basis[r] = col;
        self.stats.pivots += 1;
        if theta <= MASS_EPS {
            self.stats.degenerate_pivots += 1;
        }
        self.since_refactor += 1;
        if self.since_refactor >= self.refactor_every {
            self.refactor()?;
        }
        Ok(())
    }

    /// Positive-mass basic entries as `(tuple, mass)`.
    pub(crate) fn vertex(&self) -> Vec<(Vec<usize>, f64)> {
        self.vertex_from(&self.x, None)
    }

    fn vertex_from(&self, x: &[f64], extra: Option<(usize, f64)>) -> Vec<(Vec<usize>, f64)> {
        let shape = &self.layout.shape;
        let mut index = vec![0; shape.len()];
        let mut out = Vec::new();
        for (&col, &mass) in self.basis.iter().zip(x).chain(extra.as_ref().map(|(c, v)| (c, v))) {
            if mass > MASS_EPS {
                unflatten(shape, col, &mut index);
                out.push((index.clone(), mass));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Other optimal vertices reachable by one pivot on a zero reduced cost
    /// column with a positive step. At most `limit` are returned.
    pub(crate) fn adjacent_optima(&mut self, limit: usize) -> Vec<Vec<(Vec<usize>, f64)>> {
        let y = self.duals();
        let mut found = Vec::new();
        for col in 0..self.costs.len() {
            if found.len() >= limit {
                break;
            }
            if self.is_basic[col] || self.reduced_cost(col, &y).abs() > DUAL_DEGENERATE_TOL {
                continue;
            }
            let w = self.direction(col);
            let Some(r) = self.leaving(&w) else { continue };
            let theta = self.x[r] / w[r];
            if theta <= MASS_EPS {
                continue;
            }
            let x: Vec<f64> = self.x.iter().zip(&w).map(|(xi, wi)| (xi - theta * wi).max(0.0)).collect();
            found.push(self.vertex_from(&x, Some((col, theta))));
        }
        found
    }

    pub(crate) fn report(
        mut self,
        tensor: &CostTensor,
        system: Arc<MarginalSystem>,
    ) -> Result<SolveReport, SolverError> {
        let y = self.duals();
        let potentials = self.layout.potentials(&y);
        let entries = self.vertex();
        let mut degeneracy = Degeneracy {
            degenerate_basics: self.x.iter().filter(|&&v| v <= MASS_EPS).count(),
            zero_reduced_costs: 0,
        };
        for col in 0..self.costs.len() {
            if !self.is_basic[col] && self.reduced_cost(col, &y).abs() <= DUAL_DEGENERATE_TOL {
                degeneracy.zero_reduced_costs += 1;
            }
        }
        let coupling = Coupling::new(system.clone(), entries)?;
        let primal = coupling.cost(tensor);
        let dual = potentials.dual_objective(&system);
        Ok(SolveReport {
            primal,
            dual,
            gap: primal - dual,
            dual_violation: potentials.max_violation(tensor),
            coupling,
            potentials,
            iterations: self.stats,
            degeneracy,
            pivot_order: self.order,
            vertex_bound: self.layout.rows,
        })
    }
}

/// Exact optimum with the default (forward) pivot order.
pub fn solve_exact_lp(tensor: &CostTensor, system: &MarginalSystem) -> Result<SolveReport, SolverError> {
    solve_exact_lp_with(tensor, system, LpOptions::default())
}

pub fn solve_exact_lp_with(
    tensor: &CostTensor,
    system: &MarginalSystem,
    options: LpOptions,
) -> Result<SolveReport, SolverError> {
    tensor.check_system(system)?;
    Simplex::run(tensor.values(), system, options)?.report(tensor, Arc::new(system.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{random_generic_measure, Space};

    #[test]
    fn northwest_corner_has_full_rank_size() {
        let space = Space::interval(0.0, 1.0).unwrap();
        let system = MarginalSystem::new(
            [4, 3, 5].iter().enumerate().map(|(s, &n)| random_generic_measure(&space, n, s as u64).unwrap()).collect(),
        )
        .unwrap();
        let columns = northwest_corner(&system);
        assert_eq!(columns.len(), 4 + 3 + 5 - 3 + 1);
        let mut sorted = columns.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), columns.len());
    }

    #[test]
    fn dropped_rows_give_anchored_potentials() {
        let layout = Layout::new(&[2, 3, 2]);
        assert_eq!(layout.rows, 2 + 2 + 1);
        assert_eq!(layout.row(1, 0), None);
        assert_eq!(layout.row(1, 2), Some(3));
        assert_eq!(layout.row(2, 1), Some(4));
        let u = layout.potentials(&DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]));
        assert_eq!(u.u, vec![vec![1.0, 2.0], vec![0.0, 3.0, 4.0], vec![0.0, 5.0]]);
    }
}
