//! Twist audits on supports, Monge-graph structure, and the differential
//! conditions built from mixed Hessians.
//!
//! Every verdict here is sampling evidence about a fixture. A clean audit
//! says no violation was found among the cases examined, nothing more.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::costs::{CostError, CostFunction, GradientResult};
use crate::measures::Space;
use crate::solver::Coupling;

pub const GRAD_TOL: f64 = 1e-6;
pub const POINT_TOL: f64 = 1e-8;
/// Margin `δ` for negative definiteness: all eigenvalues below `−δ`.
pub const EIGEN_MARGIN: f64 = 1e-10;
pub const DET_THRESHOLD: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-8;
const NEWTON_STEPS: usize = 20;
const MAX_CONVEXITY_PAIRS: usize = 200;

pub const SAMPLING_CAVEAT: &str =
    "sampling evidence for this fixture only; no violation found among the cases examined is not a proof";
pub const SIGN_ADVISORY: &str = "T is not negative definite but -T is; the cost may follow the opposite \
     (surplus maximization) sign convention";

#[derive(Debug, Error)]
pub enum TwistError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("atom index {index} out of range ({len} atoms)")]
    AtomIndex { index: usize, len: usize },
    #[error("atom {0} of the first marginal carries no mass in the coupling")]
    EmptySection(usize),
    #[error("this operation needs m ≥ {needed}, got {got}")]
    Arity { needed: usize, got: usize },
    #[error("D²_(x1 xm) c is singular at the point (|det| = {det:e})")]
    Singular { det: f64 },
    #[error("blocks 1 and m have dimensions {first} and {last}; they must agree")]
    Dimension { first: usize, last: usize },
    #[error("anchor {anchor} does not pin coordinate {coordinate} to the base point")]
    AnchorPinning { anchor: usize, coordinate: usize },
    #[error("expected {expected} anchors, got {got}")]
    AnchorCount { expected: usize, got: usize },
    #[error("no analytic second derivative for this cost")]
    NoAnalytic,
    #[error("{0}")]
    Grid(String),
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn concat_dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(p, q)| euclid(p, q).powi(2)).sum::<f64>().sqrt()
}

fn refs(x: &[Vec<f64>]) -> Vec<&[f64]> {
    x.iter().map(Vec::as_slice).collect()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Partner {
    /// Atom indices of `x_2, …, x_m`.
    pub indices: Vec<usize>,
    pub point: Vec<Vec<f64>>,
    pub gradient: GradientResult,
}

/// Support tuples sharing one first coordinate.
#[derive(Debug, Clone, Serialize)]
pub struct SupportSection {
    pub x1_index: usize,
    pub x1: Vec<f64>,
    pub partners: Vec<Partner>,
}

pub fn section_of_support(
    cost: &CostFunction,
    coupling: &Coupling,
    x1_index: usize,
) -> Result<SupportSection, TwistError> {
    let system = coupling.system();
    let len = system.measure(0).len();
    if x1_index >= len {
        return Err(TwistError::AtomIndex { index: x1_index, len });
    }
    let x1 = system.measure(0).atom(x1_index).to_vec();
    let mut partners = Vec::new();
    for e in coupling.entries().iter().filter(|e| e.index[0] == x1_index) {
        let point: Vec<Vec<f64>> = system.point(&e.index).into_iter().map(<[f64]>::to_vec).collect();
        let gradient = cost.grad_block(&refs(&point), 0)?;
        partners.push(Partner { indices: e.index[1..].to_vec(), point: point[1..].to_vec(), gradient });
    }
    if partners.is_empty() {
        return Err(TwistError::EmptySection(x1_index));
    }
    Ok(SupportSection { x1_index, x1, partners })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphReport {
    pub is_graph: bool,
    /// First-marginal atoms with more than one partner tuple.
    pub multivalued: Vec<usize>,
    /// Partner tuple of each first-marginal atom, when the support is a graph.
    pub map: Option<Vec<Vec<usize>>>,
}

/// Whether the support is the graph of a map from the first coordinate.
pub fn graph_check(coupling: &Coupling) -> GraphReport {
    let mut sections: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for e in coupling.entries() {
        sections.entry(e.index[0]).or_default().push(e.index[1..].to_vec());
    }
    let multivalued: Vec<usize> = sections.iter().filter(|(_, p)| p.len() > 1).map(|(&k, _)| k).collect();
    let is_graph = multivalued.is_empty();
    let map = is_graph.then(|| sections.into_values().map(|mut p| p.remove(0)).collect());
    GraphReport { is_graph, multivalued, map }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Collision {
    pub x1_index: usize,
    pub partners: (Vec<usize>, Vec<usize>),
    pub gradient_distance: f64,
    pub partner_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectionVerdict {
    pub x1_index: usize,
    pub partners: usize,
    pub collisions: usize,
    pub injective: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwistReport {
    pub sections: usize,
    pub collisions: Vec<Collision>,
    /// Partners skipped because `D_{x1} c` does not exist there.
    pub nondifferentiable_excluded: usize,
    pub verdicts: Vec<SectionVerdict>,
    pub caveat: &'static str,
}

impl TwistReport {
    pub fn passed(&self) -> bool {
        self.collisions.is_empty()
    }
}

/// Injectivity of partner ↦ `D_{x1} c` within every section of the support.
pub fn check_twist_on_support(
    cost: &CostFunction,
    coupling: &Coupling,
    grad_tol: f64,
    point_tol: f64,
) -> Result<TwistReport, TwistError> {
    let mut x1s: Vec<usize> = coupling.entries().iter().map(|e| e.index[0]).collect();
    x1s.dedup();
    let mut report = TwistReport {
        sections: x1s.len(),
        collisions: Vec::new(),
        nondifferentiable_excluded: 0,
        verdicts: Vec::new(),
        caveat: SAMPLING_CAVEAT,
    };
    for x1 in x1s {
        let section = section_of_support(cost, coupling, x1)?;
        let smooth: Vec<(&Partner, &[f64])> =
            section.partners.iter().filter_map(|p| p.gradient.gradient().map(|g| (p, g))).collect();
        report.nondifferentiable_excluded += section.partners.len() - smooth.len();
        let before = report.collisions.len();
        for a in 0..smooth.len() {
            for b in a + 1..smooth.len() {
                let gradient_distance = euclid(smooth[a].1, smooth[b].1);
                let partner_distance = concat_dist(&smooth[a].0.point, &smooth[b].0.point);
                if gradient_distance <= grad_tol && partner_distance > point_tol {
                    report.collisions.push(Collision {
                        x1_index: x1,
                        partners: (smooth[a].0.indices.clone(), smooth[b].0.indices.clone()),
                        gradient_distance,
                        partner_distance,
                    });
                }
            }
        }
        let collisions = report.collisions.len() - before;
        report.verdicts.push(SectionVerdict {
            x1_index: x1,
            partners: section.partners.len(),
            collisions,
            injective: collisions == 0,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Analytic when the cost provides it, finite differences otherwise.
    #[default]
    Auto,
    Analytic,
    FiniteDifference,
}

/// `D²_{x_i x_j} c` at `x`; for `i = j` the Hessian in block `i`.
pub fn mixed_hessian(
    cost: &CostFunction,
    x: &[Vec<f64>],
    i: usize,
    j: usize,
    mode: HessianMode,
) -> Result<DMatrix<f64>, TwistError> {
    let m = cost.arity();
    for b in [i, j] {
        if b >= m {
            return Err(CostError::BlockIndex { index: b, arity: m }.into());
        }
    }
    let x = refs(x);
    cost.eval(&x)?;
    match mode {
        HessianMode::Analytic => cost.analytic_second(&x, i, j).ok_or(TwistError::NoAnalytic),
        HessianMode::FiniteDifference => Ok(cost.numeric_second(&x, i, j)?),
        HessianMode::Auto => match cost.analytic_second(&x, i, j) {
            Some(h) => Ok(h),
            None => Ok(cost.numeric_second(&x, i, j)?),
        },
    }
}

/// Seeded uniform tuples from the product of boxes.
pub fn sample_tuples(spaces: &[Space], count: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| spaces.iter().map(|s| s.sample(&mut rng)).collect()).collect()
}

fn check_first_last(cost: &CostFunction) -> Result<(), TwistError> {
    let dims = cost.block_dims();
    let (first, last) = (dims[0], dims[dims.len() - 1]);
    if first != last {
        return Err(TwistError::Dimension { first, last });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NondegeneracyReport {
    pub samples: usize,
    pub min_abs_det: f64,
    pub worst_sample: Option<usize>,
    pub threshold: f64,
    pub passed: bool,
    pub caveat: &'static str,
}

/// Smallest `|det D²_{x1 xm} c|` over the samples.
pub fn nondegeneracy_check(
    cost: &CostFunction,
    samples: &[Vec<Vec<f64>>],
    threshold: f64,
    mode: HessianMode,
) -> Result<NondegeneracyReport, TwistError> {
    check_first_last(cost)?;
    let last = cost.arity() - 1;
    let mut min_abs_det = f64::INFINITY;
    let mut worst_sample = None;
    for (k, x) in samples.iter().enumerate() {
        let det = mixed_hessian(cost, x, 0, last, mode)?.determinant().abs();
        if det < min_abs_det {
            min_abs_det = det;
            worst_sample = Some(k);
        }
    }
    Ok(NondegeneracyReport {
        samples: samples.len(),
        min_abs_det,
        worst_sample,
        threshold,
        passed: !samples.is_empty() && min_abs_det > threshold,
        caveat: SAMPLING_CAVEAT,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosestPair {
    pub grid_indices: (usize, usize),
    pub gradient_distance: f64,
    pub point_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OneMTwistReport {
    pub grid_points: usize,
    pub injective: bool,
    pub collisions: usize,
    /// Distinct grid points with the closest gradients.
    pub closest: Option<ClosestPair>,
    pub nondifferentiable_excluded: usize,
}

/// Injectivity of `x_m ↦ D_{x1} c(x_1, …, x_{m−1}, x_m)` on a grid.
pub fn one_m_twist_check(
    cost: &CostFunction,
    fixed: &[Vec<f64>],
    grid: &[Vec<f64>],
    grad_tol: f64,
    point_tol: f64,
) -> Result<OneMTwistReport, TwistError> {
    if grid.len() < 2 {
        return Err(TwistError::Grid(format!("need at least 2 grid points, got {}", grid.len())));
    }
    let mut gradients = Vec::with_capacity(grid.len());
    let mut excluded = 0;
    for (k, xm) in grid.iter().enumerate() {
        let mut x = fixed.to_vec();
        x.push(xm.clone());
        match cost.grad_block(&refs(&x), 0)? {
            GradientResult::Differentiable { gradient } => gradients.push((k, gradient)),
            GradientResult::Nondifferentiable { .. } => excluded += 1,
        }
    }
    let mut collisions = 0;
    let mut closest: Option<ClosestPair> = None;
    for a in 0..gradients.len() {
        for b in a + 1..gradients.len() {
            let (ka, kb) = (gradients[a].0, gradients[b].0);
            let point_distance = euclid(&grid[ka], &grid[kb]);
            if point_distance <= point_tol {
                continue;
            }
            let gradient_distance = euclid(&gradients[a].1, &gradients[b].1);
            if gradient_distance <= grad_tol {
                collisions += 1;
            }
            if closest.as_ref().is_none_or(|c| gradient_distance < c.gradient_distance) {
                closest = Some(ClosestPair { grid_indices: (ka, kb), gradient_distance, point_distance });
            }
        }
    }
    Ok(OneMTwistReport {
        grid_points: grid.len(),
        injective: collisions == 0,
        collisions,
        closest,
        nondifferentiable_excluded: excluded,
    })
}

fn middle_offsets(cost: &CostFunction) -> (Vec<usize>, usize) {
    let dims = cost.block_dims();
    let mut offsets = Vec::new();
    let mut total = 0;
    for &d in &dims[1..dims.len() - 1] {
        offsets.push(total);
        total += d;
    }
    (offsets, total)
}

fn require_three(cost: &CostFunction) -> Result<usize, TwistError> {
    let m = cost.arity();
    if m < 3 {
        return Err(TwistError::Arity { needed: 3, got: m });
    }
    Ok(m)
}

/// The form `S` at `ybar` on the concatenated middle coordinates.
pub fn tensor_s(cost: &CostFunction, ybar: &[Vec<f64>], mode: HessianMode) -> Result<DMatrix<f64>, TwistError> {
    let m = require_three(cost)?;
    check_first_last(cost)?;
    let last = m - 1;
    let d1m = mixed_hessian(cost, ybar, 0, last, mode)?;
    let det = d1m.determinant();
    if det.abs() <= DET_THRESHOLD {
        return Err(TwistError::Singular { det: det.abs() });
    }
    let inv = d1m.try_inverse().ok_or(TwistError::Singular { det: det.abs() })?;
    let (offsets, side) = middle_offsets(cost);
    let dims = cost.block_dims();
    let mut s = DMatrix::zeros(side, side);
    let left: Vec<DMatrix<f64>> = (1..last)
        .map(|i| mixed_hessian(cost, ybar, i, last, mode).map(|h| h * &inv))
        .collect::<Result<_, _>>()?;
    let right: Vec<DMatrix<f64>> =
        (1..last).map(|j| mixed_hessian(cost, ybar, 0, j, mode)).collect::<Result<_, _>>()?;
    for i in 1..last {
        for j in 1..last {
            let mut block = &left[i - 1] * &right[j - 1];
            if i != j {
                block -= mixed_hessian(cost, ybar, i, j, mode)?;
            }
            s.view_mut((offsets[i - 1], offsets[j - 1]), (dims[i], dims[j])).copy_from(&block);
        }
    }
    Ok(s)
}

/// Block-diagonal `Σ_i Hess_{x_i} c(ȳ(i)) − Hess_{x_i} c(ȳ)`; `anchors[k]`
/// is `ȳ(k + 2)` and must agree with `ybar` in coordinate `k + 2`.
pub fn tensor_h(
    cost: &CostFunction,
    ybar: &[Vec<f64>],
    anchors: &[Vec<Vec<f64>>],
    mode: HessianMode,
) -> Result<DMatrix<f64>, TwistError> {
    let m = require_three(cost)?;
    if anchors.len() != m - 2 {
        return Err(TwistError::AnchorCount { expected: m - 2, got: anchors.len() });
    }
    for (k, anchor) in anchors.iter().enumerate() {
        if anchor.len() != m || anchor[k + 1] != ybar[k + 1] {
            return Err(TwistError::AnchorPinning { anchor: k, coordinate: k + 1 });
        }
    }
    let (offsets, side) = middle_offsets(cost);
    let dims = cost.block_dims();
    let mut h = DMatrix::zeros(side, side);
    for i in 1..m - 1 {
        let block = mixed_hessian(cost, &anchors[i - 1], i, i, mode)? - mixed_hessian(cost, ybar, i, i, mode)?;
        h.view_mut((offsets[i - 1], offsets[i - 1]), (dims[i], dims[i])).copy_from(&block);
    }
    Ok(h)
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).abs().max()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().cloned().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Asymmetry {
    pub s: f64,
    pub h: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorReport {
    pub ybar: Vec<Vec<f64>>,
    pub anchors: Vec<Vec<Vec<f64>>>,
    pub s: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub t: Vec<Vec<f64>>,
    /// Largest `|M − Mᵀ|` entry before symmetrization.
    pub asymmetry: Asymmetry,
    pub symmetric: bool,
    pub eigenvalues_t: Vec<f64>,
    pub eigenvalues_neg_t: Vec<f64>,
    pub t_negative_definite: bool,
    pub neg_t_negative_definite: bool,
}

/// S, H and `T = S + H` at one base point and anchor choice, symmetrized.
pub fn tensor_report(
    cost: &CostFunction,
    ybar: &[Vec<f64>],
    anchors: &[Vec<Vec<f64>>],
    mode: HessianMode,
    margin: f64,
) -> Result<TensorReport, TwistError> {
    let s_raw = tensor_s(cost, ybar, mode)?;
    let h_raw = tensor_h(cost, ybar, anchors, mode)?;
    let t_raw = &s_raw + &h_raw;
    let asym = Asymmetry { s: asymmetry(&s_raw), h: asymmetry(&h_raw), t: asymmetry(&t_raw) };
    let (s, h) = (symmetrize(&s_raw), symmetrize(&h_raw));
    let t = &s + &h;
    let eigenvalues_t = sorted_eigenvalues(&t);
    let eigenvalues_neg_t: Vec<f64> = eigenvalues_t.iter().rev().map(|v| -v).collect();
    Ok(TensorReport {
        ybar: ybar.to_vec(),
        anchors: anchors.to_vec(),
        s: rows(&s),
        h: rows(&h),
        t: rows(&t),
        symmetric: asym.t <= SYMMETRY_TOL,
        asymmetry: asym,
        t_negative_definite: eigenvalues_t.last().is_some_and(|&v| v < -margin),
        neg_t_negative_definite: eigenvalues_neg_t.last().is_some_and(|&v| v < -margin),
        eigenvalues_t,
        eigenvalues_neg_t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TScanReport {
    pub reports: Vec<TensorReport>,
    /// Base points where `D²_{x1 xm} c` was singular.
    pub skipped_singular: usize,
    pub max_eigenvalue: f64,
    pub min_eigenvalue: f64,
    /// Range of the eigenvalues of `−T` over all samples.
    pub neg_t_range: (f64, f64),
    pub negative_on_samples: bool,
    pub margin: f64,
    pub advisory: Option<&'static str>,
    pub caveat: &'static str,
}

/// Seeded scan of `T` over base points and pinned anchors.
#[allow(clippy::too_many_arguments)]
pub fn tensor_t_scan(
    cost: &CostFunction,
    spaces: &[Space],
    base_samples: usize,
    anchors_per_base: usize,
    seed: u64,
    mode: HessianMode,
    margin: f64,
) -> Result<TScanReport, TwistError> {
    let m = require_three(cost)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut skipped = 0;
    for _ in 0..base_samples {
        let ybar: Vec<Vec<f64>> = spaces.iter().map(|s| s.sample(&mut rng)).collect();
        for _ in 0..anchors_per_base.max(1) {
            let anchors: Vec<Vec<Vec<f64>>> = (1..m - 1)
                .map(|i| {
                    let mut a: Vec<Vec<f64>> = spaces.iter().map(|s| s.sample(&mut rng)).collect();
                    a[i] = ybar[i].clone();
                    a
                })
                .collect();
            match tensor_report(cost, &ybar, &anchors, mode, margin) {
                Ok(r) => reports.push(r),
                Err(TwistError::Singular { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    let all = || reports.iter().flat_map(|r| r.eigenvalues_t.iter().cloned());
    let max_eigenvalue = all().fold(f64::NEG_INFINITY, f64::max);
    let min_eigenvalue = all().fold(f64::INFINITY, f64::min);
    let negative_on_samples = !reports.is_empty() && max_eigenvalue < -margin;
    let advisory = (!negative_on_samples && !reports.is_empty() && -min_eigenvalue < -margin).then_some(SIGN_ADVISORY);
    Ok(TScanReport {
        skipped_singular: skipped,
        max_eigenvalue,
        min_eigenvalue,
        neg_t_range: (-max_eigenvalue, -min_eigenvalue),
        negative_on_samples,
        margin,
        advisory,
        caveat: SAMPLING_CAVEAT,
        reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YSample {
    pub middle: Vec<Vec<f64>>,
    pub xm: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YSectionSample {
    pub x1: Vec<f64>,
    pub p1: Vec<f64>,
    pub tested: usize,
    pub samples: Vec<YSample>,
    pub residual_tol: f64,
}

fn gradient_residual(cost: &CostFunction, x: &[Vec<f64>], p1: &[f64]) -> Result<Option<(Vec<f64>, f64)>, TwistError> {
    Ok(cost.grad_block(&refs(x), 0)?.gradient().map(|g| {
        let diff: Vec<f64> = g.iter().zip(p1).map(|(a, b)| a - b).collect();
        let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        (diff, norm)
    }))
}

/// Best `x_m` with `D_{x1} c(x_1, middle, x_m) ≈ p1`: grid search, then
/// Newton steps on `D²_{x1 xm} c`, kept inside the box.
fn solve_last(
    cost: &CostFunction,
    x1: &[f64],
    middle: &[Vec<f64>],
    p1: &[f64],
    grid: &[Vec<f64>],
    space: &Space,
) -> Result<Option<(Vec<f64>, f64)>, TwistError> {
    let tuple = |xm: &[f64]| {
        let mut x = vec![x1.to_vec()];
        x.extend(middle.iter().cloned());
        x.push(xm.to_vec());
        x
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for xm in grid {
        if let Some((_, r)) = gradient_residual(cost, &tuple(xm), p1)? {
            if best.as_ref().is_none_or(|b| r < b.1) {
                best = Some((xm.clone(), r));
            }
        }
    }
    let Some((mut xm, mut r)) = best else { return Ok(None) };
    let last = cost.arity() - 1;
    for _ in 0..NEWTON_STEPS {
        if r == 0.0 {
            break;
        }
        let x = tuple(&xm);
        let Some((diff, _)) = gradient_residual(cost, &x, p1)? else { break };
        let jac = mixed_hessian(cost, &x, 0, last, HessianMode::Auto)?;
        let Some(step) = jac.lu().solve(&nalgebra::DVector::from_vec(diff)) else { break };
        let mut next: Vec<f64> = xm.iter().zip(step.iter()).map(|(a, s)| a - s).collect();
        space.clamp(&mut next);
        match gradient_residual(cost, &tuple(&next), p1)? {
            Some((_, nr)) if nr < r => {
                xm = next;
                r = nr;
            }
            _ => break,
        }
    }
    Ok(Some((xm, r)))
}

/// Point cloud approximating `{(x_2, …, x_{m−1}) : ∃ x_m, D_{x1} c = p1}`.
pub fn y_section_sample(
    cost: &CostFunction,
    x1: &[f64],
    p1: &[f64],
    middle_grid: &[Vec<Vec<f64>>],
    xm_grid: &[Vec<f64>],
    xm_space: &Space,
    residual_tol: f64,
) -> Result<YSectionSample, TwistError> {
    require_three(cost)?;
    if xm_grid.is_empty() {
        return Err(TwistError::Grid("empty x_m grid".into()));
    }
    let mut samples = Vec::new();
    for middle in middle_grid {
        if let Some((xm, residual)) = solve_last(cost, x1, middle, p1, xm_grid, xm_space)? {
            if residual <= residual_tol {
                samples.push(YSample { middle: middle.clone(), xm, residual });
            }
        }
    }
    Ok(YSectionSample {
        x1: x1.to_vec(),
        p1: p1.to_vec(),
        tested: middle_grid.len(),
        samples,
        residual_tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityAdvisory {
    pub pairs_tested: usize,
    pub midpoints_inside: usize,
    pub note: &'static str,
}

/// Midpoint membership over pairs of sampled points. Advisory only: it
/// neither proves nor refutes convexity of the set.
pub fn midpoint_convexity(
    cost: &CostFunction,
    sample: &YSectionSample,
    xm_grid: &[Vec<f64>],
    xm_space: &Space,
) -> Result<ConvexityAdvisory, TwistError> {
    let mut pairs_tested = 0;
    let mut midpoints_inside = 0;
    'outer: for a in 0..sample.samples.len() {
        for b in a + 1..sample.samples.len() {
            if pairs_tested >= MAX_CONVEXITY_PAIRS {
                break 'outer;
            }
            pairs_tested += 1;
            let mid: Vec<Vec<f64>> = sample.samples[a]
                .middle
                .iter()
                .zip(&sample.samples[b].middle)
                .map(|(p, q)| p.iter().zip(q).map(|(u, v)| 0.5 * (u + v)).collect())
                .collect();
            if let Some((_, r)) = solve_last(cost, &sample.x1, &mid, &sample.p1, xm_grid, xm_space)? {
                if r <= sample.residual_tol {
                    midpoints_inside += 1;
                }
            }
        }
    }
    Ok(ConvexityAdvisory {
        pairs_tested,
        midpoints_inside,
        note: "midpoint membership heuristic; convexity of the set is not verified",
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::spec::{gangbo_swiech_cubic, independent_of_last, pairwise_inner};
    use crate::costs::{PairField, ScalarField};
    use crate::measures::{DiscreteMeasure, MarginalSystem};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn pt(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&a| vec![a]).collect()
    }

    fn unit() -> Space {
        Space::interval(0.0, 1.0).unwrap()
    }

    fn gs(m: usize) -> CostFunction {
        CostFunction::gangbo_swiech(m, 1).unwrap()
    }

    fn two_point_coupling(entries: Vec<(Vec<usize>, f64)>, n: &[usize]) -> Coupling {
        let measures = n
            .iter()
            .map(|&k| {
                let atoms = (0..k).map(|a| vec![a as f64]).collect();
                DiscreteMeasure::uniform(Space::interval(-1.0, 5.0).unwrap(), atoms).unwrap()
            })
            .collect();
        Coupling::new(Arc::new(MarginalSystem::new(measures).unwrap()), entries).unwrap()
    }

    #[test]
    fn sections_collect_partners() {
        let diag = two_point_coupling(vec![(vec![0, 0, 0], 0.5), (vec![1, 1, 1], 0.5)], &[2, 2, 2]);
        assert_eq!(section_of_support(&gs(3), &diag, 0).unwrap().partners.len(), 1);
        let shared = two_point_coupling(vec![(vec![0, 0, 1], 0.5), (vec![0, 1, 0], 0.5)], &[1, 2, 2]);
        let section = section_of_support(&gs(3), &shared, 0).unwrap();
        assert_eq!(section.partners.len(), 2);
        assert!(matches!(section_of_support(&gs(3), &shared, 3), Err(TwistError::AtomIndex { .. })));
    }

    #[test]
    fn graph_of_identity_and_product() {
        let id = two_point_coupling(vec![(vec![0, 0], 0.5), (vec![1, 1], 0.5)], &[2, 2]);
        let g = graph_check(&id);
        assert!(g.is_graph);
        assert_eq!(g.map.unwrap(), vec![vec![0], vec![1]]);
        let product = Coupling::product(id.system().clone()).unwrap();
        let g = graph_check(&product);
        assert!(!g.is_graph);
        assert_eq!(g.multivalued, vec![0, 1]);
    }

    #[test]
    fn quadratic_twist_has_no_collisions() {
        let product = Coupling::product(two_point_coupling(vec![(vec![0, 0], 0.5), (vec![1, 1], 0.5)], &[2, 2]).system().clone()).unwrap();
        let report = check_twist_on_support(&gs(2), &product, GRAD_TOL, POINT_TOL).unwrap();
        assert!(report.passed());
        assert_eq!(report.sections, 2);
    }

    #[test]
    fn artificial_section_collides_once() {
        let c = two_point_coupling(vec![(vec![0, 0, 1], 0.5), (vec![0, 1, 0], 0.5)], &[1, 2, 2]);
        let report = check_twist_on_support(&gs(3), &c, GRAD_TOL, POINT_TOL).unwrap();
        assert_eq!(report.collisions.len(), 1);
        assert_eq!(report.collisions[0].gradient_distance, 0.0);
        assert!(!report.verdicts[0].injective);
    }

    #[test]
    fn analytic_mixed_hessians() {
        let x = pt(&[0.2, 0.5, 0.9]);
        assert_eq!(mixed_hessian(&gs(3), &x, 0, 2, HessianMode::Analytic).unwrap()[(0, 0)], -2.0);
        let heinich = CostFunction::heinich(3, 2, ScalarField::neg_quadratic(1.0)).unwrap();
        let x2 = vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]];
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let h = mixed_hessian(&heinich, &x2, i, j, HessianMode::Analytic).unwrap();
            assert_eq!(h, DMatrix::from_diagonal_element(2, 2, -2.0));
        }
        let chain = CostFunction::chain_bilinear(1, PairField::product(1.0)).unwrap();
        assert_eq!(mixed_hessian(&chain, &x, 0, 1, HessianMode::Auto).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn finite_difference_hessians_match_analytic() {
        use rand::Rng;
        let costs = [
            gs(3),
            CostFunction::heinich(3, 1, ScalarField::neg_cosh()).unwrap(),
            CostFunction::chain_bilinear(1, PairField::product(1.0)).unwrap(),
            gangbo_swiech_cubic(3, 0.3).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for cost in &costs {
            for _ in 0..50 {
                let x: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
                for i in 0..3 {
                    for j in 0..3 {
                        let a = mixed_hessian(cost, &x, i, j, HessianMode::Analytic).unwrap()[(0, 0)];
                        let f = mixed_hessian(cost, &x, i, j, HessianMode::FiniteDifference).unwrap()[(0, 0)];
                        assert!((a - f).abs() <= 1e-5 * (1.0 + a.abs()), "{cost:?} ({i},{j}): {a} vs {f}");
                    }
                }
            }
        }
    }

    #[test]
    fn nondegeneracy_verdicts() {
        let samples = sample_tuples(&[unit(), unit(), unit()], 20, 1);
        let r = nondegeneracy_check(&gs(3), &samples, DET_THRESHOLD, HessianMode::Auto).unwrap();
        assert!(r.passed);
        assert_eq!(r.min_abs_det, 2.0);
        let bilinear = pairwise_inner(2, 1, 1.0).unwrap();
        let r = nondegeneracy_check(&bilinear, &sample_tuples(&[unit(), unit()], 20, 1), DET_THRESHOLD, HessianMode::Auto).unwrap();
        assert!(r.passed);
        assert_abs_diff_eq!(r.min_abs_det, 1.0, epsilon = 1e-12);
        let flat = independent_of_last(3, 1).unwrap();
        let r = nondegeneracy_check(&flat, &samples, DET_THRESHOLD, HessianMode::Auto).unwrap();
        assert!(!r.passed);
        assert_eq!(r.min_abs_det, 0.0);
    }

    #[test]
    fn one_m_twist_verdicts() {
        let grid: Vec<Vec<f64>> = (0..21).map(|k| vec![k as f64 / 20.0]).collect();
        let r = one_m_twist_check(&gs(2), &pt(&[0.3]), &grid, GRAD_TOL, POINT_TOL).unwrap();
        assert!(r.injective);
        let r = one_m_twist_check(&gs(3), &pt(&[0.3, 0.6]), &grid, GRAD_TOL, POINT_TOL).unwrap();
        assert!(r.injective);
        assert_abs_diff_eq!(r.closest.unwrap().gradient_distance, 2.0 / 20.0, epsilon = 1e-12);
        let flat = independent_of_last(3, 1).unwrap();
        let r = one_m_twist_check(&flat, &pt(&[0.3, 0.6]), &grid, GRAD_TOL, POINT_TOL).unwrap();
        assert!(!r.injective);
        assert_eq!(r.collisions, 21 * 20 / 2);
        assert!(one_m_twist_check(&gs(2), &pt(&[0.3]), &grid[..1], GRAD_TOL, POINT_TOL).is_err());
    }

    #[test]
    fn s_tensor_values() {
        let y = pt(&[0.1, 0.4, 0.8]);
        assert_eq!(tensor_s(&gs(3), &y, HessianMode::Analytic).unwrap()[(0, 0)], -2.0);
        let fixture = pairwise_inner(3, 1, -1.0).unwrap();
        assert_abs_diff_eq!(tensor_s(&fixture, &y, HessianMode::Analytic).unwrap()[(0, 0)], -1.0, epsilon = 1e-15);
        let s4 = tensor_s(&gs(4), &pt(&[0.1, 0.4, 0.8, 0.3]), HessianMode::Analytic).unwrap();
        assert_eq!(s4, DMatrix::from_diagonal_element(2, 2, -2.0));
        assert_eq!(sorted_eigenvalues(&s4), vec![-2.0, -2.0]);
        assert!(matches!(
            tensor_s(&independent_of_last(3, 1).unwrap(), &y, HessianMode::Auto),
            Err(TwistError::Singular { .. })
        ));
        assert!(matches!(tensor_s(&gs(2), &pt(&[0.0, 1.0]), HessianMode::Auto), Err(TwistError::Arity { .. })));
    }

    #[test]
    fn h_tensor_values() {
        let y = pt(&[0.1, 0.4, 0.8]);
        let anchors = vec![pt(&[0.9, 0.4, 0.2])];
        assert_eq!(tensor_h(&gs(3), &y, &anchors, HessianMode::Auto).unwrap()[(0, 0)], 0.0);
        assert_eq!(tensor_h(&gs(3), &y, std::slice::from_ref(&y), HessianMode::Auto).unwrap()[(0, 0)], 0.0);
        let cubic = gangbo_swiech_cubic(3, 0.5).unwrap();
        let h = tensor_h(&cubic, &y, &anchors, HessianMode::Analytic).unwrap();
        assert_abs_diff_eq!(h[(0, 0)], 0.0, epsilon = 1e-15);
        let h = tensor_h(&cubic, &y, &anchors, HessianMode::FiniteDifference).unwrap();
        assert_abs_diff_eq!(h[(0, 0)], 0.0, epsilon = 1e-6);
        let bad = vec![pt(&[0.9, 0.5, 0.2])];
        assert!(matches!(tensor_h(&gs(3), &y, &bad, HessianMode::Auto), Err(TwistError::AnchorPinning { .. })));
    }

    #[test]
    fn t_is_s_plus_h() {
        let cubic = gangbo_swiech_cubic(4, 0.7).unwrap();
        let y = pt(&[0.1, 0.4, 0.8, 0.3]);
        let anchors = vec![pt(&[0.5, 0.4, 0.1, 0.9]), pt(&[0.2, 0.6, 0.8, 0.0])];
        let r = tensor_report(&cubic, &y, &anchors, HessianMode::FiniteDifference, EIGEN_MARGIN).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert_eq!(r.t[a][b], r.s[a][b] + r.h[a][b]);
            }
        }
        assert!(r.asymmetry.s < 1e-6 && r.asymmetry.h < 1e-6);
    }

    #[test]
    fn scans_on_reference_costs() {
        let spaces = vec![unit(); 3];
        let r = tensor_t_scan(&gs(3), &spaces, 10, 3, 1, HessianMode::Analytic, EIGEN_MARGIN).unwrap();
        assert!(r.negative_on_samples);
        assert!(r.reports.iter().all(|t| t.t[0][0] == -2.0));
        let heinich = CostFunction::heinich(3, 1, ScalarField::neg_quadratic(1.0)).unwrap();
        let r = tensor_t_scan(&heinich, &spaces, 10, 3, 2, HessianMode::Auto, EIGEN_MARGIN).unwrap();
        assert!(r.negative_on_samples);
        assert!((r.max_eigenvalue + 2.0).abs() < 1e-12);
        let chain = CostFunction::chain_bilinear(1, PairField::product(1.0)).unwrap();
        let r = tensor_t_scan(&chain, &spaces, 10, 3, 3, HessianMode::Auto, EIGEN_MARGIN).unwrap();
        assert!(!r.negative_on_samples);
        assert_eq!(r.max_eigenvalue, 1.0);
        assert_eq!(r.advisory, Some(SIGN_ADVISORY));
        assert_eq!(r.neg_t_range, (-1.0, -1.0));
        let flat = independent_of_last(3, 1).unwrap();
        let r = tensor_t_scan(&flat, &spaces, 4, 1, 3, HessianMode::Auto, EIGEN_MARGIN).unwrap();
        assert_eq!(r.skipped_singular, 4);
        assert!(!r.negative_on_samples);
    }

    #[test]
    fn y_section_for_gangbo_swiech() {
        let cost = gs(3);
        let (x1, a, b) = (0.4, 0.3, 0.6);
        let p1 = cost.grad_block(&[&[x1], &[a], &[b]], 0).unwrap().gradient().unwrap().to_vec();
        let middle: Vec<Vec<Vec<f64>>> = (0..11).map(|k| vec![vec![k as f64 / 10.0]]).collect();
        let grid: Vec<Vec<f64>> = (0..51).map(|k| vec![k as f64 / 50.0]).collect();
        let sample = y_section_sample(&cost, &[x1], &p1, &middle, &grid, &unit(), 1e-9).unwrap();
        assert!(!sample.samples.is_empty());
        for s in &sample.samples {
            assert_abs_diff_eq!(s.xm[0], a + b - s.middle[0][0], epsilon = 1e-9);
        }
        // x_2 + x_3 = 0.9 is solvable in [0, 1] exactly when x_2 ≥ −0.1 and ≤ 0.9
        assert_eq!(sample.samples.len(), 10);
        let adv = midpoint_convexity(&cost, &sample, &grid, &unit()).unwrap();
        assert_eq!(adv.midpoints_inside, adv.pairs_tested);

        let far = y_section_sample(&cost, &[x1], &[100.0], &middle, &grid, &unit(), 1e-6).unwrap();
        assert!(far.samples.is_empty());
        let exact = y_section_sample(&cost, &[x1], &p1, &middle, &grid, &unit(), 0.0).unwrap();
        assert!(exact.samples.iter().all(|s| s.residual == 0.0));
    }
}
