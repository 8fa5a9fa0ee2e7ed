//! Infimal-convolution costs `min_y Σ_j c_j(X_j, y)` over a discretized `y`.
//!
//! The minimum is located by a scan of a candidate grid, a golden-section
//! line search per coordinate around each discrete local minimum, and a final
//! bisection on the sign of `∂_y` when the parts are differentiable in `y`.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{sup_dist, CostError, CostFunction, GradientResult, Smoothness};
use crate::measures::Space;

/// Maximum number of coordinate sweeps of golden-section refinement.
pub const REFINE_SWEEPS: usize = 30;
/// Target bracket width of each golden-section search.
pub const REFINE_TOL: f64 = 1e-10;
/// Relative value tolerance for two candidates to both count as minimizers.
pub const ARGMIN_VALUE_TOL: f64 = 1e-9;
/// Distance from a face of the `y` box under which a minimizer is on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-9;
/// Local minima beyond this many (best first) are not refined.
const MAX_REFINED: usize = 64;

/// Boundaries `0 = m_0 < m_1 < … < m_k = m` splitting the tuple into blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    boundaries: Vec<usize>,
}

impl BlockPartition {
    pub fn new(boundaries: Vec<usize>) -> Result<Self, CostError> {
        if boundaries.len() < 2 || boundaries[0] != 0 {
            return Err(CostError::Parameter(format!(
                "partition must start at 0 and have at least one block: {boundaries:?}"
            )));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CostError::Parameter(format!(
                "partition must be strictly increasing: {boundaries:?}"
            )));
        }
        Ok(Self { boundaries })
    }

    /// Every coordinate in its own block.
    pub fn singletons(m: usize) -> Result<Self, CostError> {
        Self::new((0..=m).collect())
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Number of blocks `k`.
    pub fn blocks(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Total number of coordinates `m`.
    pub fn arity(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    pub fn range(&self, j: usize) -> Range<usize> {
        self.boundaries[j]..self.boundaries[j + 1]
    }

    /// Block containing coordinate `i` and the position of `i` inside it.
    pub fn block_of(&self, i: usize) -> (usize, usize) {
        let j = self.boundaries.windows(2).position(|w| i >= w[0] && i < w[1]).unwrap();
        (j, i - self.boundaries[j])
    }
}

/// Finite stand-in for the auxiliary manifold `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct YDomain {
    space: Space,
    grid: Vec<Vec<f64>>,
    axis_steps: Vec<f64>,
    step: f64,
    neighbors: Vec<Vec<usize>>,
    continuous: bool,
}

impl YDomain {
    /// Tensor grid with `per_axis` points along every axis of the box.
    pub fn regular(space: Space, per_axis: usize) -> Result<Self, CostError> {
        if per_axis < 2 {
            return Err(CostError::Parameter("a regular y grid needs ≥ 2 points per axis".into()));
        }
        let dim = space.dim();
        let axis_steps: Vec<f64> = (0..dim)
            .map(|k| (space.upper()[k] - space.lower()[k]) / (per_axis - 1) as f64)
            .collect();
        let total = per_axis.pow(dim as u32);
        let mut grid = Vec::with_capacity(total);
        let mut neighbors = Vec::with_capacity(total);
        for flat in 0..total {
            let idx = unflatten(flat, per_axis, dim);
            grid.push(
                (0..dim)
                    .map(|k| {
                        if idx[k] == per_axis - 1 {
                            space.upper()[k]
                        } else {
                            space.lower()[k] + idx[k] as f64 * axis_steps[k]
                        }
                    })
                    .collect(),
            );
            let mut nbrs = Vec::new();
            for offset in 0..3usize.pow(dim as u32) {
                let delta = unflatten(offset, 3, dim);
                if delta.iter().all(|&d| d == 1) {
                    continue;
                }
                let mut ok = true;
                let mut other = 0;
                for k in (0..dim).rev() {
                    let v = idx[k] as isize + delta[k] as isize - 1;
                    if v < 0 || v >= per_axis as isize {
                        ok = false;
                        break;
                    }
                    other = other * per_axis + v as usize;
                }
                if ok {
                    nbrs.push(other);
                }
            }
            neighbors.push(nbrs);
        }
        let step = axis_steps.iter().cloned().fold(0.0, f64::max);
        Ok(Self { space, grid, axis_steps, step, neighbors, continuous: true })
    }

    /// Arbitrary candidate points; the grid step is the largest
    /// nearest-neighbour distance.
    pub fn from_points(space: Space, points: Vec<Vec<f64>>) -> Result<Self, CostError> {
        Self::validate_points(&space, &points)?;
        if points.len() < 2 {
            return Err(CostError::Parameter("a continuous y grid needs ≥ 2 points".into()));
        }
        let n = points.len();
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let step = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| dist(&points[i], &points[j]))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        let radius = 1.01 * step * (space.dim() as f64).sqrt();
        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && dist(&points[i], &points[j]) <= radius).collect())
            .collect();
        let axis_steps = vec![step; space.dim()];
        Ok(Self { space, grid: points, axis_steps, step, neighbors, continuous: true })
    }

    /// A finite `Y`: minimization is exact over the listed points, with no
    /// refinement, and distinct points are distinct minimizers.
    pub fn discrete(space: Space, points: Vec<Vec<f64>>) -> Result<Self, CostError> {
        Self::validate_points(&space, &points)?;
        let n = points.len();
        Ok(Self {
            axis_steps: vec![0.0; space.dim()],
            space,
            grid: points,
            step: 0.0,
            neighbors: vec![Vec::new(); n],
            continuous: false,
        })
    }

    fn validate_points(space: &Space, points: &[Vec<f64>]) -> Result<(), CostError> {
        if points.is_empty() {
            return Err(CostError::Parameter("y grid must be nonempty".into()));
        }
        if points.iter().any(|p| !space.contains(p)) {
            return Err(CostError::Parameter("y grid point outside the y box".into()));
        }
        Ok(())
    }

    pub fn space(&self) -> &Space {
        &self.space
    }

    pub fn grid(&self) -> &[Vec<f64>] {
        &self.grid
    }

    /// Grid spacing used for refinement brackets and argmin clustering.
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn is_continuous(&self) -> bool {
        self.continuous
    }

    fn is_interior(&self, y: &[f64]) -> bool {
        self.continuous
            && y.iter().zip(self.space.lower().iter().zip(self.space.upper())).all(|(&v, (&lo, &hi))| {
                v - lo > BOUNDARY_TOL * (1.0 + lo.abs()) && hi - v > BOUNDARY_TOL * (1.0 + hi.abs())
            })
    }
}

fn unflatten(mut flat: usize, base: usize, dim: usize) -> Vec<usize> {
    let mut idx = vec![0; dim];
    for slot in idx.iter_mut() {
        *slot = flat % base;
        flat /= base;
    }
    idx
}

type MinimizerFn = Arc<dyn Fn(&[&[f64]]) -> Vec<Vec<f64>> + Send + Sync>;

/// Closed-form minimizer(s) of `y ↦ Σ_j c_j(X_j, y)`.
#[derive(Clone)]
pub struct ExactMinimizer {
    name: String,
    minimizers: MinimizerFn,
    unique: bool,
}

impl fmt::Debug for ExactMinimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExactMinimizer").field("name", &self.name).field("unique", &self.unique).finish()
    }
}

impl ExactMinimizer {
    /// `unique` certifies a single minimizer for every argument, which makes the
    /// resulting cost everywhere smooth.
    pub fn new(
        name: impl Into<String>,
        unique: bool,
        minimizers: impl Fn(&[&[f64]]) -> Vec<Vec<f64>> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), minimizers: Arc::new(minimizers), unique }
    }

    /// The mean of the blocks, which minimizes `Σ_i |x_i − y|²`.
    pub fn barycenter() -> Self {
        Self::new("barycenter", true, |x| {
            let m = x.len() as f64;
            let mut y = vec![0.0; x[0].len()];
            for p in x {
                for (acc, v) in y.iter_mut().zip(p.iter()) {
                    *acc += v / m;
                }
            }
            vec![y]
        })
    }
}

/// One cluster of minimizers of the inner sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimizer {
    /// Lowest-value member of the cluster.
    pub point: Vec<f64>,
    pub value: f64,
    /// Number of refined candidates merged into this cluster.
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalityReport {
    /// `max |D_y Σ_j c_j(X_j, y*)|` over interior minimizers (0 when none).
    pub max_gradient_norm: f64,
    pub interior: usize,
    /// Minimizers on the boundary of `Y` (or on a finite `Y`), not judged.
    pub boundary: Vec<Vec<f64>>,
    pub passed: bool,
}

pub(crate) struct InfimalCost {
    parts: Vec<CostFunction>,
    partition: BlockPartition,
    y: YDomain,
    exact: Option<ExactMinimizer>,
    matching: bool,
    block_dims: Vec<usize>,
}

impl InfimalCost {
    pub(crate) fn new(
        parts: Vec<CostFunction>,
        partition: BlockPartition,
        y: YDomain,
        exact: Option<ExactMinimizer>,
        matching: bool,
    ) -> Result<Self, CostError> {
        if parts.len() != partition.blocks() {
            return Err(CostError::Partition { covered: partition.blocks(), arity: parts.len() });
        }
        if partition.arity() < 2 {
            return Err(CostError::Parameter("infimal convolution needs m ≥ 2".into()));
        }
        let mut block_dims = Vec::with_capacity(partition.arity());
        for (j, part) in parts.iter().enumerate() {
            let size = partition.range(j).len();
            if part.arity() != size + 1 {
                return Err(CostError::PartArity { part: j, got: part.arity(), expected: size + 1 });
            }
            let dims = part.block_dims();
            if dims[size] != y.space.dim() {
                return Err(CostError::Parameter(format!(
                    "part {j} expects y of dimension {}, domain has {}",
                    dims[size],
                    y.space.dim()
                )));
            }
            block_dims.extend_from_slice(&dims[..size]);
        }
        Ok(Self { parts, partition, y, exact, matching, block_dims })
    }

    pub(crate) fn with_exact(&self, exact: ExactMinimizer) -> Self {
        Self {
            parts: self.parts.clone(),
            partition: self.partition.clone(),
            y: self.y.clone(),
            exact: Some(exact),
            matching: self.matching,
            block_dims: self.block_dims.clone(),
        }
    }

    pub(crate) fn block_dims(&self) -> Vec<usize> {
        self.block_dims.clone()
    }

    pub(crate) fn parts(&self) -> &[CostFunction] {
        &self.parts
    }

    pub(crate) fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub(crate) fn y_domain(&self) -> &YDomain {
        &self.y
    }

    pub(crate) fn is_matching(&self) -> bool {
        self.matching
    }

    pub(crate) fn smoothness(&self) -> Smoothness {
        match &self.exact {
            Some(e) if e.unique => Smoothness::EverywhereSmooth,
            _ => Smoothness::SemiconcaveNonsmooth,
        }
    }

    fn part_args<'a>(&self, x: &[&'a [f64]], j: usize, y: &'a [f64]) -> Vec<&'a [f64]> {
        let mut args: Vec<&[f64]> = x[self.partition.range(j)].to_vec();
        args.push(y);
        args
    }

    pub(crate) fn inner_sum(&self, x: &[&[f64]], y: &[f64]) -> Result<f64, CostError> {
        let mut total = 0.0;
        for (j, part) in self.parts.iter().enumerate() {
            total += part.eval_unchecked(&self.part_args(x, j, y))?;
        }
        Ok(total)
    }

    /// `D_y Σ_j c_j(X_j, y)`, or `None` where some part is not differentiable.
    fn y_gradient(&self, x: &[&[f64]], y: &[f64]) -> Result<Option<Vec<f64>>, CostError> {
        let mut total = vec![0.0; y.len()];
        for (j, part) in self.parts.iter().enumerate() {
            let args = self.part_args(x, j, y);
            match part.grad_block(&args, args.len() - 1) {
                Ok(GradientResult::Differentiable { gradient }) => {
                    for (acc, g) in total.iter_mut().zip(gradient) {
                        *acc += g;
                    }
                }
                Ok(GradientResult::Nondifferentiable { .. }) => return Ok(None),
                Err(CostError::NoGradient(_)) => return Ok(None),
                Err(e) => return Err(e),
            }
        }
        Ok(Some(total))
    }

    /// Refined candidate minimizers with their values (unsorted).
    fn candidates(&self, x: &[&[f64]]) -> Result<Vec<(Vec<f64>, f64)>, CostError> {
        if let Some(exact) = &self.exact {
            return (exact.minimizers)(x)
                .into_iter()
                .map(|y| {
                    let v = self.inner_sum(x, &y)?;
                    Ok((y, v))
                })
                .collect();
        }
        let values = self
            .y
            .grid
            .iter()
            .map(|g| self.inner_sum(x, g))
            .collect::<Result<Vec<f64>, _>>()?;
        if !self.y.continuous {
            return Ok(self.y.grid.iter().cloned().zip(values).collect());
        }
        let mut local: Vec<usize> = (0..values.len())
            .filter(|&g| self.y.neighbors[g].iter().all(|&n| values[g] <= values[n]))
            .collect();
        local.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        local.truncate(MAX_REFINED);
        local.into_iter().map(|g| self.refine(x, &self.y.grid[g], values[g])).collect()
    }

    fn refine(&self, x: &[&[f64]], start: &[f64], start_value: f64) -> Result<(Vec<f64>, f64), CostError> {
        let space = &self.y.space;
        let dim = start.len();
        let brackets: Vec<(f64, f64)> = (0..dim)
            .map(|k| {
                let s = self.y.axis_steps[k];
                ((start[k] - s).max(space.lower()[k]), (start[k] + s).min(space.upper()[k]))
            })
            .collect();
        let mut y = start.to_vec();
        let mut value = start_value;
        let mut probe = y.clone();
        for _ in 0..REFINE_SWEEPS {
            let before = y.clone();
            for (k, &(lo, hi)) in brackets.iter().enumerate() {
                probe.copy_from_slice(&y);
                let (t, v) = golden_section(lo, hi, |t| {
                    probe[k] = t;
                    self.inner_sum(x, &probe)
                })?;
                if v < value {
                    y[k] = t;
                    value = v;
                }
            }
            if sup_dist(&before, &y) <= REFINE_TOL {
                break;
            }
        }
        self.polish(x, &mut y, &mut value)?;
        Ok((y, value))
    }

    /// Bisection on the sign of each partial derivative in `y`, accepted only
    /// when the value does not increase beyond round-off.
    fn polish(&self, x: &[&[f64]], y: &mut [f64], value: &mut f64) -> Result<(), CostError> {
        let space = &self.y.space;
        let mut probe = y.to_vec();
        for _ in 0..3 {
            let mut moved = false;
            for k in 0..y.len() {
                let t0 = y[k];
                let w = 1e-6 * (1.0 + t0.abs());
                let (mut a, mut b) = ((t0 - w).max(space.lower()[k]), (t0 + w).min(space.upper()[k]));
                probe.copy_from_slice(y);
                let partial = |t: f64, probe: &mut Vec<f64>| -> Result<Option<f64>, CostError> {
                    probe[k] = t;
                    Ok(self.y_gradient(x, probe)?.map(|g| g[k]))
                };
                let (Some(ga), Some(gb)) = (partial(a, &mut probe)?, partial(b, &mut probe)?) else {
                    return Ok(());
                };
                if !(ga < 0.0 && gb > 0.0) {
                    continue;
                }
                for _ in 0..64 {
                    let mid = 0.5 * (a + b);
                    if mid <= a || mid >= b {
                        break;
                    }
                    match partial(mid, &mut probe)? {
                        Some(g) if g < 0.0 => a = mid,
                        Some(g) if g > 0.0 => b = mid,
                        Some(_) => {
                            a = mid;
                            b = mid;
                        }
                        None => return Ok(()),
                    }
                }
                let t = 0.5 * (a + b);
                probe.copy_from_slice(y);
                probe[k] = t;
                let v = self.inner_sum(x, &probe)?;
                if v <= *value + 4.0 * f64::EPSILON * (1.0 + value.abs()) && t != t0 {
                    y[k] = t;
                    *value = v;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
        Ok(())
    }

    pub(crate) fn eval(&self, x: &[&[f64]]) -> Result<f64, CostError> {
        Ok(self.candidates(x)?.into_iter().map(|(_, v)| v).fold(f64::INFINITY, f64::min))
    }

    pub(crate) fn argmin(&self, x: &[&[f64]]) -> Result<Vec<Minimizer>, CostError> {
        let mut cands = self.candidates(x)?;
        cands.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = cands[0].1;
        let cutoff = best + ARGMIN_VALUE_TOL * (1.0 + best.abs());
        let radius = 2.0 * self.y.step;
        let mut clusters: Vec<Minimizer> = Vec::new();
        for (point, value) in cands.into_iter().filter(|(_, v)| *v <= cutoff) {
            let dist = |c: &Minimizer| -> f64 {
                c.point.iter().zip(&point).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            };
            match clusters.iter_mut().find(|c| dist(c) <= radius) {
                Some(c) => c.members += 1,
                None => clusters.push(Minimizer { point, value, members: 1 }),
            }
        }
        Ok(clusters)
    }

    pub(crate) fn grad_block(&self, x: &[&[f64]], i: usize) -> Result<GradientResult, CostError> {
        let (j, local) = self.partition.block_of(i);
        let mut candidates = Vec::new();
        for min in self.argmin(x)? {
            let args = self.part_args(x, j, &min.point);
            match self.parts[j].grad_block(&args, local)? {
                GradientResult::Differentiable { gradient } => candidates.push(gradient),
                GradientResult::Nondifferentiable { witnesses } => candidates.extend(witnesses),
            }
        }
        Ok(GradientResult::from_candidates(candidates))
    }

    pub(crate) fn criticality(&self, x: &[&[f64]], tol: f64) -> Result<CriticalityReport, CostError> {
        let mut report =
            CriticalityReport { max_gradient_norm: 0.0, interior: 0, boundary: Vec::new(), passed: true };
        for min in self.argmin(x)? {
            if !self.y.is_interior(&min.point) {
                report.boundary.push(min.point);
                continue;
            }
            report.interior += 1;
            let norm = match self.y_gradient(x, &min.point)? {
                Some(g) => g.iter().map(|v| v * v).sum::<f64>().sqrt(),
                None => f64::INFINITY,
            };
            report.max_gradient_norm = report.max_gradient_norm.max(norm);
        }
        report.passed = report.max_gradient_norm <= tol;
        Ok(report)
    }
}

/// Golden-section search on `[lo, hi]`; returns the best point evaluated,
/// endpoints included.
fn golden_section(
    lo: f64,
    hi: f64,
    mut f: impl FnMut(f64) -> Result<f64, CostError>,
) -> Result<(f64, f64), CostError> {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    let mut best = (lo, f(lo)?);
    let fhi = f(hi)?;
    if fhi < best.1 {
        best = (hi, fhi);
    }
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    for _ in 0..200 {
        if b - a <= REFINE_TOL {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d)?;
        }
        for (t, v) in [(c, fc), (d, fd)] {
            if v < best.1 {
                best = (t, v);
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_validation() {
        assert!(BlockPartition::new(vec![0]).is_err());
        assert!(BlockPartition::new(vec![1, 2]).is_err());
        assert!(BlockPartition::new(vec![0, 2, 2]).is_err());
        let p = BlockPartition::new(vec![0, 2, 3]).unwrap();
        assert_eq!(p.blocks(), 2);
        assert_eq!(p.block_of(1), (0, 1));
        assert_eq!(p.block_of(2), (1, 0));
    }

    #[test]
    fn regular_grid_layout() {
        let y = YDomain::regular(Space::cube(2, 0.0, 1.0).unwrap(), 3).unwrap();
        assert_eq!(y.grid().len(), 9);
        assert_eq!(y.step(), 0.5);
        // the center touches all eight others, a corner touches three
        let center = y.grid().iter().position(|p| p == &vec![0.5, 0.5]).unwrap();
        assert_eq!(y.neighbors[center].len(), 8);
        assert_eq!(y.neighbors[0].len(), 3);
    }

    #[test]
    fn empty_grid_rejected() {
        let s = Space::interval(0.0, 1.0).unwrap();
        assert!(YDomain::discrete(s.clone(), vec![]).is_err());
        assert!(YDomain::from_points(s, vec![vec![2.0], vec![0.0]]).is_err());
    }

    #[test]
    fn golden_section_finds_parabola_vertex() {
        let (t, v) = golden_section(0.0, 1.0, |t| Ok((t - 0.3) * (t - 0.3))).unwrap();
        assert!((t - 0.3).abs() < 1e-7);
        assert!(v < 1e-14);
        let (t, _) = golden_section(0.0, 1.0, |t| Ok(-t)).unwrap();
        assert_eq!(t, 1.0);
    }
}
