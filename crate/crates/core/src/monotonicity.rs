//! Splitting sets, c-conjugates and c-cyclical monotonicity.
//!
//! A set `S` of atom tuples splits when potentials `u_i` exist with
//! `Σ u_i ≤ c` everywhere and equality on `S`. It is c-cyclically monotone
//! when no finite subset can lower its total cost by permuting coordinates
//! independently. Splitting implies monotone; the checker here is exhaustive
//! up to a subset size `N_max`.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::costs::{CostError, CostFunction};
use crate::measures::{DiscreteMeasure, MarginalSystem, MeasureError};
use crate::solver::{
    build_cost_tensor, for_each_index, solve_exact_lp, Coupling, CostTensor, SolverError, SplittingPotentials,
};

/// Default cap on evaluated permutation sums.
pub const DEFAULT_BUDGET: u64 = 10_000_000;
/// Relative slack below which a cost decrease is not a violation.
pub const DEFICIT_TOL: f64 = 1e-9;
/// Sweeps used to push extended potentials towards c-conjugacy.
const CONJUGATE_SWEEPS: usize = 3;
const DENSE_CACHE_LIMIT: usize = 1 << 22;

#[derive(Debug, Error)]
pub enum MonotonicityError {
    #[error("support set is empty")]
    Empty,
    #[error("point {index} has {got} coordinates blocks, expected {expected}")]
    Arity { index: usize, got: usize, expected: usize },
    #[error("points {first} and {second} coincide")]
    Duplicate { first: usize, second: usize },
    #[error("point {0} is not an atom tuple of the marginal system")]
    NotAnAtom(usize),
    #[error("marginal index {index} out of range for arity {arity}")]
    MarginalIndex { index: usize, arity: usize },
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    CouplingSupport,
    UserSupplied,
    Projection,
}

/// A finite set of `m`-tuples given by coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportSet {
    points: Vec<Vec<Vec<f64>>>,
    provenance: Provenance,
}

impl SupportSet {
    pub fn new(points: Vec<Vec<Vec<f64>>>, provenance: Provenance) -> Result<Self, MonotonicityError> {
        let expected = points.first().ok_or(MonotonicityError::Empty)?.len();
        for (index, p) in points.iter().enumerate() {
            if p.len() != expected {
                return Err(MonotonicityError::Arity { index, got: p.len(), expected });
            }
        }
        for first in 0..points.len() {
            for second in first + 1..points.len() {
                if points[first] == points[second] {
                    return Err(MonotonicityError::Duplicate { first, second });
                }
            }
        }
        Ok(Self { points, provenance })
    }

    pub fn from_coupling(coupling: &Coupling) -> Self {
        Self { points: coupling.support_points(), provenance: Provenance::CouplingSupport }
    }

    /// Support tuples given as atom indices of `system`.
    pub fn from_indices(system: &MarginalSystem, tuples: &[Vec<usize>]) -> Result<Self, MonotonicityError> {
        let points = tuples
            .iter()
            .map(|t| system.point(t).into_iter().map(<[f64]>::to_vec).collect())
            .collect();
        Self::new(points, Provenance::UserSupplied)
    }

    pub fn points(&self) -> &[Vec<Vec<f64>>] {
        &self.points
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn arity(&self) -> usize {
        self.points[0].len()
    }

    /// Atom indices of every point.
    pub fn indices(&self, system: &MarginalSystem) -> Result<Vec<Vec<usize>>, MonotonicityError> {
        self.points
            .iter()
            .enumerate()
            .map(|(k, p)| system.locate(p).ok_or(MonotonicityError::NotAnAtom(k)))
            .collect()
    }
}

/// `u_i[a] = min_{tuples with a_i = a} c − Σ_{j≠i} u_j`. The entry `u[i]` is
/// ignored.
pub fn c_conjugate_tensor(tensor: &CostTensor, u: &[Vec<f64>], i: usize) -> Result<Vec<f64>, MonotonicityError> {
    let shape = tensor.shape();
    if i >= shape.len() {
        return Err(MonotonicityError::MarginalIndex { index: i, arity: shape.len() });
    }
    if u.len() != shape.len() || u.iter().zip(shape).enumerate().any(|(j, (uj, &n))| j != i && uj.len() != n) {
        return Err(SolverError::PotentialShape.into());
    }
    let mut out = vec![f64::INFINITY; shape[i]];
    let values = tensor.values();
    for_each_index(shape, |flat, index| {
        let others: f64 = u.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, uj)| uj[index[j]]).sum();
        let v = values[flat] - others;
        if v < out[index[i]] {
            out[index[i]] = v;
        }
    });
    Ok(out)
}

pub fn c_conjugate(
    u: &[Vec<f64>],
    cost: &CostFunction,
    system: &MarginalSystem,
    i: usize,
) -> Result<Vec<f64>, MonotonicityError> {
    c_conjugate_tensor(&build_cost_tensor(system, cost)?, u, i)
}

/// Replace each `u_i` in turn by its c-conjugate, `sweeps` times over all `i`.
pub fn conjugate_sweeps(
    tensor: &CostTensor,
    mut potentials: SplittingPotentials,
    sweeps: usize,
) -> Result<SplittingPotentials, MonotonicityError> {
    for _ in 0..sweeps {
        for i in 0..potentials.u.len() {
            potentials.u[i] = c_conjugate_tensor(tensor, &potentials.u, i)?;
        }
    }
    Ok(potentials.normalized())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplittingCheck {
    pub certified: bool,
    /// `max_S |Σ u − c|`.
    pub equality_residual: f64,
    /// `max(0, max_all Σ u − c)`.
    pub feasibility_violation: f64,
    pub tol: f64,
}

pub fn verify_splitting_tensor(
    tensor: &CostTensor,
    support: &[Vec<usize>],
    u: &SplittingPotentials,
    tol: f64,
) -> Result<SplittingCheck, MonotonicityError> {
    u.check_shape(tensor.shape())?;
    let equality_residual = u.equality_residual(tensor, support);
    let feasibility_violation = u.max_violation(tensor).max(0.0);
    Ok(SplittingCheck {
        certified: equality_residual <= tol && feasibility_violation <= tol,
        equality_residual,
        feasibility_violation,
        tol,
    })
}

/// Check the potentials against `S` on every atom tuple of `system`.
pub fn verify_splitting_set(
    set: &SupportSet,
    u: &SplittingPotentials,
    cost: &CostFunction,
    system: &MarginalSystem,
    tol: f64,
) -> Result<SplittingCheck, MonotonicityError> {
    let support = set.indices(system)?;
    verify_splitting_tensor(&build_cost_tensor(system, cost)?, &support, u, tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplittingVerdict {
    Certified,
    Refuted,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertifierReport {
    pub verdict: SplittingVerdict,
    /// Cost of the uniform plan on `S` minus the optimum for its own
    /// projections; zero (up to tolerance) exactly when `S` splits.
    pub excess: f64,
    pub potentials: Option<SplittingPotentials>,
    pub check: Option<SplittingCheck>,
}

/// Decide whether a set of atom tuples splits.
///
/// The uniform plan `γ_S` on `S` is optimal for its own marginals exactly when
/// `S` splits on the product of its projections, and the exact LP settles
/// that. Duals on the projections are then extended atom by atom (each new
/// value the largest feasible one) and pushed through a few conjugate sweeps;
/// neither step touches equality on `S`.
pub fn certify_splitting(
    tensor: &CostTensor,
    system: &MarginalSystem,
    support: &[Vec<usize>],
    tol: f64,
) -> Result<CertifierReport, MonotonicityError> {
    if support.is_empty() {
        return Err(MonotonicityError::Empty);
    }
    let m = system.arity();
    let mut used: Vec<Vec<usize>> = vec![Vec::new(); m];
    for t in support {
        for (i, &a) in t.iter().enumerate() {
            used[i].push(a);
        }
    }
    let mut counts: Vec<Vec<(usize, usize)>> = Vec::with_capacity(m);
    for u in &mut used {
        u.sort_unstable();
        let mut c: Vec<(usize, usize)> = Vec::new();
        for &a in u.iter() {
            match c.last_mut() {
                Some((b, k)) if *b == a => *k += 1,
                _ => c.push((a, 1)),
            }
        }
        counts.push(c);
    }
    let total = support.len() as f64;
    let measures = counts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mu = system.measure(i);
            let atoms = c.iter().map(|&(a, _)| mu.atom(a).to_vec()).collect();
            let weights = c.iter().map(|&(_, k)| k as f64 / total).collect();
            DiscreteMeasure::new(mu.space().clone(), atoms, weights)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let restricted = MarginalSystem::new(measures)?;
    let local_shape: Vec<usize> = counts.iter().map(Vec::len).collect();
    let mut values = Vec::with_capacity(local_shape.iter().product());
    let mut global = vec![0; m];
    for_each_index(&local_shape, |_, index| {
        for i in 0..m {
            global[i] = counts[i][index[i]].0;
        }
        values.push(tensor.get(&global));
    });
    let local = CostTensor::new(local_shape, values)?;
    let lp = solve_exact_lp(&local, &restricted)?;
    let uniform_cost: f64 = support.iter().map(|t| tensor.get(t)).sum::<f64>() / total;
    let excess = uniform_cost - lp.primal;
    if excess > tol * (1.0 + lp.primal.abs()) {
        return Ok(CertifierReport { verdict: SplittingVerdict::Refuted, excess, potentials: None, check: None });
    }

    let shape = tensor.shape().to_vec();
    let mut u: Vec<Vec<f64>> = shape.iter().map(|&n| vec![f64::NAN; n]).collect();
    for i in 0..m {
        for (k, &(a, _)) in counts[i].iter().enumerate() {
            u[i][a] = lp.potentials.u[i][k];
        }
    }
    // Extend marginal by marginal over tuples whose coordinates are defined.
    for i in 0..m {
        let mut best = vec![f64::INFINITY; shape[i]];
        for_each_index(&shape, |flat, index| {
            if !u[i][index[i]].is_nan() {
                return;
            }
            let mut others = 0.0;
            for (j, uj) in u.iter().enumerate() {
                if j != i {
                    let v = uj[index[j]];
                    if v.is_nan() {
                        return;
                    }
                    others += v;
                }
            }
            let v = tensor.values()[flat] - others;
            if v < best[index[i]] {
                best[index[i]] = v;
            }
        });
        for (slot, b) in u[i].iter_mut().zip(best) {
            if slot.is_nan() {
                *slot = b;
            }
        }
    }
    let potentials = conjugate_sweeps(tensor, SplittingPotentials::new(u), CONJUGATE_SWEEPS)?;
    let check = verify_splitting_tensor(tensor, support, &potentials, tol.max(1e-9) * (1.0 + tensor.max_abs()))?;
    let verdict = if check.certified { SplittingVerdict::Certified } else { SplittingVerdict::Refuted };
    Ok(CertifierReport { verdict, excess, potentials: Some(potentials), check: Some(check) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Positions of the subset within the support set.
    pub subset: Vec<usize>,
    pub points: Vec<Vec<Vec<f64>>>,
    /// `σ_1, …, σ_m` with `σ_1 = Id`.
    pub permutations: Vec<Vec<usize>>,
    pub original: f64,
    pub permuted: f64,
    pub deficit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub monotone: bool,
    /// Largest `N` for which every subset and permutation was checked.
    pub n_checked: usize,
    pub n_requested: usize,
    /// False when the budget ran out before `n_requested` was covered.
    pub complete: bool,
    pub worst: Option<Violation>,
    /// Permutation sums evaluated.
    pub work: u64,
}

impl MonotonicityReport {
    pub fn deficit(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |v| v.deficit)
    }
}

enum Cache {
    Dense(Vec<f64>),
    Sparse(HashMap<Vec<usize>, f64>),
}

struct CostCache<'a> {
    cost: &'a CostFunction,
    points: &'a [Vec<Vec<f64>>],
    cache: Cache,
}

impl<'a> CostCache<'a> {
    fn new(cost: &'a CostFunction, points: &'a [Vec<Vec<f64>>]) -> Self {
        let n = points.len();
        let m = points[0].len() as u32;
        let cache = match n.checked_pow(m) {
            Some(size) if size <= DENSE_CACHE_LIMIT => Cache::Dense(vec![f64::NAN; size]),
            _ => Cache::Sparse(HashMap::new()),
        };
        Self { cost, points, cache }
    }

    /// `c(x^{k_1}_1, …, x^{k_m}_m)`.
    fn get(&mut self, k: &[usize]) -> Result<f64, CostError> {
        let n = self.points.len();
        let eval = |k: &[usize]| {
            let x: Vec<&[f64]> = k.iter().enumerate().map(|(i, &p)| self.points[p][i].as_slice()).collect();
            self.cost.eval(&x)
        };
        match &mut self.cache {
            Cache::Dense(values) => {
                let flat = k.iter().fold(0, |acc, &p| acc * n + p);
                if values[flat].is_nan() {
                    let v = eval(k)?;
                    values[flat] = v;
                }
                Ok(values[flat])
            }
            Cache::Sparse(map) => {
                if let Some(&v) = map.get(k) {
                    return Ok(v);
                }
                let v = eval(k)?;
                map.insert(k.to_vec(), v);
                Ok(v)
            }
        }
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else { return out };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).unwrap();
        p.swap(i - 1, j);
        p[i..].reverse();
    }
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    for i in (0..k).rev() {
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Exhaustive c-cyclical monotonicity up to subsets of size `n_max`, with
/// `σ_1 = Id`. Stops at the first violation or when `budget` permutation
/// sums have been evaluated.
pub fn is_cyclically_monotone(
    set: &SupportSet,
    cost: &CostFunction,
    n_max: usize,
    budget: u64,
) -> Result<MonotonicityReport, MonotonicityError> {
    let m = set.arity();
    if m != cost.arity() {
        return Err(MonotonicityError::Arity { index: 0, got: m, expected: cost.arity() });
    }
    let points = set.points();
    let mut cache = CostCache::new(cost, points);
    let n_top = n_max.min(points.len());
    let mut report = MonotonicityReport {
        monotone: true,
        n_checked: n_top.min(1),
        n_requested: n_max,
        complete: true,
        worst: None,
        work: 0,
    };
    let mut k = vec![0usize; m];
    for n in 2..=n_top {
        let perms = permutations(n);
        let mut subset: Vec<usize> = (0..n).collect();
        loop {
            let mut original = 0.0;
            for &p in &subset {
                k.iter_mut().for_each(|slot| *slot = p);
                original += cache.get(&k)?;
            }
            let threshold = DEFICIT_TOL * (1.0 + original.abs());
            let mut choice = vec![0usize; m - 1];
            loop {
                if choice.iter().any(|&c| c != 0) {
                    if report.work >= budget {
                        report.complete = false;
                        return Ok(report);
                    }
                    report.work += 1;
                    let mut permuted = 0.0;
                    for r in 0..n {
                        k[0] = subset[r];
                        for (i, &c) in choice.iter().enumerate() {
                            k[i + 1] = subset[perms[c][r]];
                        }
                        permuted += cache.get(&k)?;
                    }
                    let deficit = original - permuted;
                    if deficit > threshold {
                        let mut permutations = vec![perms[0].clone()];
                        permutations.extend(choice.iter().map(|&c| perms[c].clone()));
                        report.monotone = false;
                        report.worst = Some(Violation {
                            subset: subset.clone(),
                            points: subset.iter().map(|&p| points[p].clone()).collect(),
                            permutations,
                            original,
                            permuted,
                            deficit,
                        });
                        return Ok(report);
                    }
                }
                let mut slot = 0;
                while slot < choice.len() {
                    choice[slot] += 1;
                    if choice[slot] < perms.len() {
                        break;
                    }
                    choice[slot] = 0;
                    slot += 1;
                }
                if slot == choice.len() {
                    break;
                }
            }
            if !next_combination(&mut subset, points.len()) {
                break;
            }
        }
        report.n_checked = n;
    }
    Ok(report)
}

/// Monotonicity for pairs only.
pub fn order_two_monotone(set: &SupportSet, cost: &CostFunction) -> Result<MonotonicityReport, MonotonicityError> {
    is_cyclically_monotone(set, cost, 2, DEFAULT_BUDGET)
}

/// `{(X_j, y) : x ∈ spt γ, y ∈ argmin}` with every argmin cluster included.
pub fn projected_set(coupling: &Coupling, cost: &CostFunction, j: usize) -> Result<SupportSet, MonotonicityError> {
    let partition = cost.partition()?;
    if j >= partition.blocks() {
        return Err(CostError::BlockIndex { index: j, arity: partition.blocks() }.into());
    }
    let range = partition.range(j);
    let mut points: Vec<Vec<Vec<f64>>> = Vec::new();
    for point in coupling.support_points() {
        let refs: Vec<&[f64]> = point.iter().map(Vec::as_slice).collect();
        for minimizer in cost.argmin_y(&refs)? {
            let mut p: Vec<Vec<f64>> = point[range.clone()].to_vec();
            p.push(minimizer.point.clone());
            if !points.contains(&p) {
                points.push(p);
            }
        }
    }
    SupportSet::new(points, Provenance::Projection)
}

/// c_j-cyclical monotonicity of the block-`j` projection of an optimal
/// support, with `y` as the last coordinate.
pub fn projected_monotonicity_check(
    coupling: &Coupling,
    cost: &CostFunction,
    j: usize,
    part: &CostFunction,
    n_max: usize,
) -> Result<MonotonicityReport, MonotonicityError> {
    let set = projected_set(coupling, cost, j)?;
    is_cyclically_monotone(&set, part, n_max, DEFAULT_BUDGET)
}
