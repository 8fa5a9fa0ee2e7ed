//! Cost functions `c(x_1, …, x_m)` with per-block gradients.
//!
//! Analytic families (pairwise quadratic, concave function of the sum, chain
//! bilinear) carry exact gradients and second derivatives. Infimal-convolution
//! and matching costs minimize over a discretized auxiliary space and report
//! gradients through the envelope theorem, flagging points where distinct
//! minimizers disagree. Tabulated costs only exist on atom tuples.

mod infimal;
pub mod spec;
mod tabulated;

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numdiff;

pub use infimal::{BlockPartition, CriticalityReport, ExactMinimizer, Minimizer, YDomain};
pub use tabulated::{read_tensor_file, write_tensor_file, TabulatedCost};

/// Candidate gradients from distinct minimizers further apart than this (sup
/// norm) make the cost nondifferentiable at the point.
pub const NONDIFF_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("expected {expected} blocks, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("block {block} has dimension {got}, expected {expected}")]
    BlockDimension { block: usize, got: usize, expected: usize },
    #[error("block index {index} out of range for arity {arity}")]
    BlockIndex { index: usize, arity: usize },
    #[error("operation needs an infimal-convolution or matching cost, got {0:?}")]
    NotInfimal(CostKind),
    #[error("partition covers {covered} coordinates but the cost has arity {arity}")]
    Partition { covered: usize, arity: usize },
    #[error("part {part} has arity {got}, expected {expected} (block size + 1)")]
    PartArity { part: usize, got: usize, expected: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("point is not an atom tuple of the tabulated cost")]
    OffTable,
    #[error("{0:?} costs have no gradient")]
    NoGradient(CostKind),
    #[error("tensor file: {0}")]
    TensorFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    GangboSwiech,
    Heinich,
    ChainBilinear,
    InfimalConvolution,
    Matching,
    Tabulated,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothness {
    EverywhereSmooth,
    SemiconcaveNonsmooth,
}

/// Derivative of a cost with respect to one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GradientResult {
    Differentiable { gradient: Vec<f64> },
    /// At least two superdifferential candidates separated by more than
    /// [`NONDIFF_TOL`].
    Nondifferentiable { witnesses: Vec<Vec<f64>> },
}

impl GradientResult {
    pub fn gradient(&self) -> Option<&[f64]> {
        match self {
            GradientResult::Differentiable { gradient } => Some(gradient),
            GradientResult::Nondifferentiable { .. } => None,
        }
    }

    pub fn is_differentiable(&self) -> bool {
        matches!(self, GradientResult::Differentiable { .. })
    }

    /// Collapse candidate gradients into one result.
    pub(crate) fn from_candidates(candidates: Vec<Vec<f64>>) -> Self {
        let mut witnesses: Vec<Vec<f64>> = Vec::new();
        for cand in candidates {
            if !witnesses.iter().any(|w| sup_dist(w, &cand) <= NONDIFF_TOL) {
                witnesses.push(cand);
            }
        }
        if witnesses.len() == 1 {
            GradientResult::Differentiable { gradient: witnesses.pop().unwrap() }
        } else {
            GradientResult::Nondifferentiable { witnesses }
        }
    }
}

pub(crate) fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// A scalar function `h: R^d → R` with its gradient and optionally its Hessian.
#[derive(Clone)]
pub struct ScalarField {
    name: String,
    value: ValueFn,
    gradient: VectorFn,
    hessian: Option<MatrixFn>,
}

impl ScalarField {
    pub fn new(
        name: impl Into<String>,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), value: Arc::new(value), gradient: Arc::new(gradient), hessian: None }
    }

    pub fn with_hessian(
        mut self,
        hessian: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.hessian = Some(Arc::new(hessian));
        self
    }

    /// `h(s) = −a |s|²`.
    pub fn neg_quadratic(scale: f64) -> Self {
        Self::new(
            format!("neg_quadratic({scale})"),
            move |s| -scale * s.iter().map(|v| v * v).sum::<f64>(),
            move |s| s.iter().map(|v| -2.0 * scale * v).collect(),
        )
        .with_hessian(move |s| DMatrix::from_diagonal_element(s.len(), s.len(), -2.0 * scale))
    }

    /// `h(s) = −Σ_k cosh(s_k)`, strictly concave with a non-constant Hessian.
    pub fn neg_cosh() -> Self {
        Self::new(
            "neg_cosh",
            |s| -s.iter().map(|v| v.cosh()).sum::<f64>(),
            |s| s.iter().map(|v| -v.sinh()).collect(),
        )
        .with_hessian(|s| {
            DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                s.len(),
                s.iter().map(|v| -v.cosh()),
            ))
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

type PairValueFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type PairGradFn = Arc<dyn Fn(&[f64], &[f64]) -> (Vec<f64>, Vec<f64>) + Send + Sync>;
type PairSecondFn = Arc<dyn Fn(&[f64], &[f64]) -> PairSecond + Send + Sync>;

/// Second derivatives of a two-block function `g(a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSecond {
    pub hess_first: DMatrix<f64>,
    pub mixed: DMatrix<f64>,
    pub hess_second: DMatrix<f64>,
}

/// A two-block function `g(x_1, x_3)` used by the chain-bilinear family.
#[derive(Clone)]
pub struct PairField {
    name: String,
    value: PairValueFn,
    gradient: PairGradFn,
    second: Option<PairSecondFn>,
}

impl PairField {
    pub fn new(
        name: impl Into<String>,
        value: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64], &[f64]) -> (Vec<f64>, Vec<f64>) + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), value: Arc::new(value), gradient: Arc::new(gradient), second: None }
    }

    pub fn with_second(
        mut self,
        second: impl Fn(&[f64], &[f64]) -> PairSecond + Send + Sync + 'static,
    ) -> Self {
        self.second = Some(Arc::new(second));
        self
    }

    pub fn zero() -> Self {
        Self::new("zero", |_, _| 0.0, |a, b| (vec![0.0; a.len()], vec![0.0; b.len()])).with_second(
            |a, b| PairSecond {
                hess_first: DMatrix::zeros(a.len(), a.len()),
                mixed: DMatrix::zeros(a.len(), b.len()),
                hess_second: DMatrix::zeros(b.len(), b.len()),
            },
        )
    }

    /// `g(a, b) = k · a·b`.
    pub fn product(scale: f64) -> Self {
        Self::new(
            format!("product({scale})"),
            move |a, b| scale * dot(a, b),
            move |a, b| {
                (b.iter().map(|v| scale * v).collect(), a.iter().map(|v| scale * v).collect())
            },
        )
        .with_second(move |a, b| PairSecond {
            hess_first: DMatrix::zeros(a.len(), a.len()),
            mixed: DMatrix::from_diagonal_element(a.len(), b.len(), scale),
            hess_second: DMatrix::zeros(b.len(), b.len()),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

type TupleValueFn = Arc<dyn Fn(&[&[f64]]) -> f64 + Send + Sync>;
type TupleGradFn = Arc<dyn Fn(&[&[f64]], usize) -> Vec<f64> + Send + Sync>;
type TupleHessFn = Arc<dyn Fn(&[&[f64]], usize, usize) -> DMatrix<f64> + Send + Sync>;

/// A user cost given by closures. Missing derivatives fall back to central
/// finite differences.
#[derive(Clone)]
pub struct CustomCost {
    name: String,
    value: TupleValueFn,
    gradient: Option<TupleGradFn>,
    hessian: Option<TupleHessFn>,
    smoothness: Smoothness,
}

impl CustomCost {
    pub fn new(
        name: impl Into<String>,
        value: impl Fn(&[&[f64]]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
            gradient: None,
            hessian: None,
            smoothness: Smoothness::EverywhereSmooth,
        }
    }

    pub fn with_gradient(
        mut self,
        gradient: impl Fn(&[&[f64]], usize) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    /// Second derivative block `D²_{x_i x_j} c` (a `d_i × d_j` matrix).
    pub fn with_hessian(
        mut self,
        hessian: impl Fn(&[&[f64]], usize, usize) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.hessian = Some(Arc::new(hessian));
        self
    }

    pub fn with_smoothness(mut self, smoothness: Smoothness) -> Self {
        self.smoothness = smoothness;
        self
    }
}

#[derive(Clone)]
enum Repr {
    GangboSwiech,
    Heinich(ScalarField),
    ChainBilinear(PairField),
    Infimal(Arc<infimal::InfimalCost>),
    Tabulated(Arc<TabulatedCost>),
    Custom(CustomCost),
}

/// Evaluator for a cost on `M_1 × … × M_m`.
#[derive(Clone)]
pub struct CostFunction {
    block_dims: Vec<usize>,
    repr: Repr,
}

impl fmt::Debug for CostFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let detail = match &self.repr {
            Repr::Heinich(h) => h.name.clone(),
            Repr::ChainBilinear(g) => g.name.clone(),
            Repr::Custom(c) => c.name.clone(),
            Repr::Infimal(inf) => format!("{} parts", inf.parts().len()),
            _ => String::new(),
        };
        f.debug_struct("CostFunction")
            .field("kind", &self.kind())
            .field("block_dims", &self.block_dims)
            .field("detail", &detail)
            .finish()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn to_matrix(rows: Vec<Vec<f64>>) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

impl CostFunction {
    /// `c(x) = Σ_{i<j} |x_i − x_j|²`, each unordered pair counted once.
    pub fn gangbo_swiech(m: usize, d: usize) -> Result<Self, CostError> {
        if m < 2 || d == 0 {
            return Err(CostError::Parameter(format!("gangbo_swiech needs m ≥ 2, d ≥ 1 (got {m}, {d})")));
        }
        Ok(Self { block_dims: vec![d; m], repr: Repr::GangboSwiech })
    }

    /// `c(x) = h(Σ_i x_i)`. Concavity of `h` is not checked.
    pub fn heinich(m: usize, d: usize, h: ScalarField) -> Result<Self, CostError> {
        if m < 2 || d == 0 {
            return Err(CostError::Parameter(format!("heinich needs m ≥ 2, d ≥ 1 (got {m}, {d})")));
        }
        Ok(Self { block_dims: vec![d; m], repr: Repr::Heinich(h) })
    }

    /// `c(x_1, x_2, x_3) = x_1·x_2 + x_2·x_3 + g(x_1, x_3)`.
    pub fn chain_bilinear(d: usize, g: PairField) -> Result<Self, CostError> {
        if d == 0 {
            return Err(CostError::Parameter("chain_bilinear needs d ≥ 1".into()));
        }
        Ok(Self { block_dims: vec![d; 3], repr: Repr::ChainBilinear(g) })
    }

    pub fn custom(block_dims: Vec<usize>, cost: CustomCost) -> Result<Self, CostError> {
        if block_dims.len() < 2 || block_dims.contains(&0) {
            return Err(CostError::Parameter("custom cost needs ≥ 2 non-empty blocks".into()));
        }
        Ok(Self { block_dims, repr: Repr::Custom(cost) })
    }

    pub fn tabulated(table: TabulatedCost) -> Self {
        Self { block_dims: table.block_dims(), repr: Repr::Tabulated(Arc::new(table)) }
    }

    /// `c(X_1, …, X_k) = min_y Σ_j c_j(X_j, y)` over the discretized `y` domain.
    pub fn infimal_convolution(
        parts: Vec<CostFunction>,
        partition: BlockPartition,
        y: YDomain,
    ) -> Result<Self, CostError> {
        let inner = infimal::InfimalCost::new(parts, partition, y, None, false)?;
        Ok(Self { block_dims: inner.block_dims(), repr: Repr::Infimal(Arc::new(inner)) })
    }

    /// Matching cost: infimal convolution with singleton blocks.
    pub fn matching_cost(parts: Vec<CostFunction>, y: YDomain) -> Result<Self, CostError> {
        let partition = BlockPartition::singletons(parts.len())?;
        let inner = infimal::InfimalCost::new(parts, partition, y, None, true)?;
        Ok(Self { block_dims: inner.block_dims(), repr: Repr::Infimal(Arc::new(inner)) })
    }

    /// Attach an exact minimizer to an infimal or matching cost. Evaluation then
    /// uses the minimizer's candidates instead of the grid search.
    pub fn with_exact_minimizer(self, exact: ExactMinimizer) -> Result<Self, CostError> {
        match &self.repr {
            Repr::Infimal(inner) => {
                let replaced = inner.with_exact(exact);
                Ok(Self { block_dims: self.block_dims, repr: Repr::Infimal(Arc::new(replaced)) })
            }
            _ => Err(CostError::NotInfimal(self.kind())),
        }
    }

    /// Quadratic matching cost `min_y Σ_i |x_i − y|²` on `m` blocks of dimension
    /// `d`, minimized over `y`.
    pub fn quadratic_matching(m: usize, d: usize, y: YDomain) -> Result<Self, CostError> {
        let parts = (0..m).map(|_| Self::gangbo_swiech(2, d)).collect::<Result<Vec<_>, _>>()?;
        Self::matching_cost(parts, y)
    }

    pub fn arity(&self) -> usize {
        self.block_dims.len()
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    pub fn kind(&self) -> CostKind {
        match &self.repr {
            Repr::GangboSwiech => CostKind::GangboSwiech,
            Repr::Heinich(_) => CostKind::Heinich,
            Repr::ChainBilinear(_) => CostKind::ChainBilinear,
            Repr::Infimal(inner) if inner.is_matching() => CostKind::Matching,
            Repr::Infimal(_) => CostKind::InfimalConvolution,
            Repr::Tabulated(_) => CostKind::Tabulated,
            Repr::Custom(_) => CostKind::Custom,
        }
    }

    pub fn smoothness(&self) -> Smoothness {
        match &self.repr {
            Repr::Infimal(inner) => inner.smoothness(),
            Repr::Tabulated(_) => Smoothness::SemiconcaveNonsmooth,
            Repr::Custom(c) => c.smoothness,
            _ => Smoothness::EverywhereSmooth,
        }
    }

    pub fn is_infimal(&self) -> bool {
        matches!(self.repr, Repr::Infimal(_))
    }

    fn infimal(&self) -> Result<&infimal::InfimalCost, CostError> {
        match &self.repr {
            Repr::Infimal(inner) => Ok(inner),
            _ => Err(CostError::NotInfimal(self.kind())),
        }
    }

    /// The component costs `c_j` of an infimal-convolution cost.
    pub fn parts(&self) -> Result<&[CostFunction], CostError> {
        Ok(self.infimal()?.parts())
    }

    pub fn partition(&self) -> Result<&BlockPartition, CostError> {
        Ok(self.infimal()?.partition())
    }

    pub fn y_domain(&self) -> Result<&YDomain, CostError> {
        Ok(self.infimal()?.y_domain())
    }

    pub(crate) fn check(&self, x: &[&[f64]]) -> Result<(), CostError> {
        if x.len() != self.arity() {
            return Err(CostError::Arity { expected: self.arity(), got: x.len() });
        }
        for (block, (p, &d)) in x.iter().zip(&self.block_dims).enumerate() {
            if p.len() != d {
                return Err(CostError::BlockDimension { block, got: p.len(), expected: d });
            }
        }
        Ok(())
    }

    /// `c(x_1, …, x_m)`.
    pub fn eval(&self, x: &[&[f64]]) -> Result<f64, CostError> {
        self.check(x)?;
        self.eval_unchecked(x)
    }

    pub(crate) fn eval_unchecked(&self, x: &[&[f64]]) -> Result<f64, CostError> {
        Ok(match &self.repr {
            Repr::GangboSwiech => {
                let mut total = 0.0;
                for i in 0..x.len() {
                    for j in i + 1..x.len() {
                        total += x[i].iter().zip(x[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    }
                }
                total
            }
            Repr::Heinich(h) => (h.value)(&block_sum(x)),
            Repr::ChainBilinear(g) => dot(x[0], x[1]) + dot(x[1], x[2]) + (g.value)(x[0], x[2]),
            Repr::Infimal(inner) => inner.eval(x)?,
            Repr::Tabulated(table) => table.lookup(x).ok_or(CostError::OffTable)?,
            Repr::Custom(c) => (c.value)(x),
        })
    }

    /// Gradient of the cost with respect to block `i`.
    pub fn grad_block(&self, x: &[&[f64]], i: usize) -> Result<GradientResult, CostError> {
        self.check(x)?;
        if i >= self.arity() {
            return Err(CostError::BlockIndex { index: i, arity: self.arity() });
        }
        let gradient = match &self.repr {
            Repr::GangboSwiech => {
                let m = x.len() as f64;
                let others = block_sum(x);
                x[i].iter()
                    .zip(&others)
                    .map(|(&xi, &s)| 2.0 * (m - 1.0) * xi - 2.0 * (s - xi))
                    .collect()
            }
            Repr::Heinich(h) => (h.gradient)(&block_sum(x)),
            Repr::ChainBilinear(g) => {
                let (ga, gb) = (g.gradient)(x[0], x[2]);
                match i {
                    0 => x[1].iter().zip(&ga).map(|(a, b)| a + b).collect(),
                    1 => x[0].iter().zip(x[2]).map(|(a, b)| a + b).collect(),
                    _ => x[1].iter().zip(&gb).map(|(a, b)| a + b).collect(),
                }
            }
            Repr::Infimal(inner) => return inner.grad_block(x, i),
            Repr::Tabulated(_) => return Err(CostError::NoGradient(CostKind::Tabulated)),
            Repr::Custom(c) => match &c.gradient {
                Some(grad) => grad(x, i),
                None => numdiff::gradient(x, i, |t| Ok::<_, CostError>((c.value)(t)))?,
            },
        };
        Ok(GradientResult::Differentiable { gradient })
    }

    /// Exact `D²_{x_i x_j} c` when the family provides it.
    pub fn analytic_second(&self, x: &[&[f64]], i: usize, j: usize) -> Option<DMatrix<f64>> {
        let (di, dj) = (self.block_dims[i], self.block_dims[j]);
        match &self.repr {
            Repr::GangboSwiech => {
                let diag = if i == j { 2.0 * (self.arity() as f64 - 1.0) } else { -2.0 };
                Some(DMatrix::from_diagonal_element(di, dj, diag))
            }
            Repr::Heinich(h) => h.hessian.as_ref().map(|hess| hess(&block_sum(x))),
            Repr::ChainBilinear(g) => {
                let second = g.second.as_ref()?(x[0], x[2]);
                let identity = DMatrix::identity(di, dj);
                Some(match (i.min(j), i.max(j)) {
                    (0, 0) => second.hess_first,
                    (2, 2) => second.hess_second,
                    (1, 1) => DMatrix::zeros(di, dj),
                    (0, 1) | (1, 2) => identity,
                    _ => {
                        if i == 0 {
                            second.mixed
                        } else {
                            second.mixed.transpose()
                        }
                    }
                })
            }
            Repr::Custom(c) => c.hessian.as_ref().map(|hess| hess(x, i, j)),
            Repr::Infimal(_) | Repr::Tabulated(_) => None,
        }
    }

    /// Finite-difference `D²_{x_i x_j} c`. Differences the block gradient when
    /// one is available in closed form (or by envelope), and uses second
    /// differences of values otherwise.
    pub fn numeric_second(
        &self,
        x: &[&[f64]],
        i: usize,
        j: usize,
    ) -> Result<DMatrix<f64>, CostError> {
        self.check(x)?;
        let has_gradient = match &self.repr {
            Repr::Custom(c) => c.gradient.is_some(),
            Repr::Tabulated(_) => return Err(CostError::NoGradient(CostKind::Tabulated)),
            _ => true,
        };
        if has_gradient {
            let rows = self.block_dims[i];
            let jac = numdiff::gradient_jacobian(x, j, rows, |t| match self.grad_block(t, i)? {
                GradientResult::Differentiable { gradient } => Ok(gradient),
                GradientResult::Nondifferentiable { witnesses } => {
                    Err(CostError::Parameter(format!(
                        "cost is not differentiable near the point ({} witnesses)",
                        witnesses.len()
                    )))
                }
            })?;
            Ok(to_matrix(jac))
        } else {
            let rows = numdiff::second_derivatives(x, i, j, |t| self.eval_unchecked(t))?;
            Ok(to_matrix(rows))
        }
    }

    /// Minimizers of `Σ_j c_j(X_j, y)` grouped into clusters.
    pub fn argmin_y(&self, x: &[&[f64]]) -> Result<Vec<Minimizer>, CostError> {
        let inner = self.infimal()?;
        self.check(x)?;
        inner.argmin(x)
    }

    /// Largest `|D_y Σ_j c_j(X_j, y*)|` over interior minimizers.
    pub fn argmin_criticality_check(
        &self,
        x: &[&[f64]],
        tol: f64,
    ) -> Result<CriticalityReport, CostError> {
        let inner = self.infimal()?;
        self.check(x)?;
        inner.criticality(x, tol)
    }

    /// `Σ_j c_j(X_j, y)` for a fixed `y`.
    pub fn inner_sum(&self, x: &[&[f64]], y: &[f64]) -> Result<f64, CostError> {
        let inner = self.infimal()?;
        self.check(x)?;
        inner.inner_sum(x, y)
    }
}

fn block_sum(x: &[&[f64]]) -> Vec<f64> {
    let mut s = vec![0.0; x[0].len()];
    for p in x {
        for (acc, v) in s.iter_mut().zip(p.iter()) {
            *acc += v;
        }
    }
    s
}
