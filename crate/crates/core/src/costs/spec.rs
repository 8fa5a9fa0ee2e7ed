//! JSON cost descriptions and the named cost library they can refer to.
//!
//! ```json
//! { "kind": "matching", "m": 3, "d": [1],
//!   "params": { "parts": "quadratic" },
//!   "y_domain": { "lower": [-1], "upper": [2], "points_per_axis": 301 } }
//! ```

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    read_tensor_file, BlockPartition, CostError, CostFunction, CostKind, CustomCost, PairField,
    ScalarField, TabulatedCost, YDomain,
};
use crate::measures::{MarginalSystem, Space};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub kind: CostKind,
    pub m: usize,
    /// Block dimensions; a single entry applies to every block.
    pub d: Vec<usize>,
    #[serde(default)]
    pub params: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_domain: Option<YDomainSpec>,
    /// Box used when sampling points for differential audits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<BoxSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YDomainSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points_per_axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub discrete: bool,
}

impl YDomainSpec {
    pub fn build(&self) -> Result<YDomain, CostError> {
        let space = Space::new(self.lower.clone(), self.upper.clone(), "y")
            .map_err(|e| CostError::Parameter(e.to_string()))?;
        match (&self.points, self.points_per_axis) {
            (Some(points), _) if self.discrete => YDomain::discrete(space, points.clone()),
            (Some(points), _) => YDomain::from_points(space, points.clone()),
            (None, Some(n)) => YDomain::regular(space, n),
            (None, None) => YDomain::regular(space, 201),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub lower: f64,
    pub upper: f64,
}

impl Default for BoxSpec {
    fn default() -> Self {
        Self { lower: 0.0, upper: 1.0 }
    }
}

/// What a spec may need besides itself.
#[derive(Debug, Clone, Default)]
pub struct BuildContext<'a> {
    /// Marginals a tabulated cost binds to.
    pub system: Option<&'a MarginalSystem>,
    /// Directory relative paths are resolved against.
    pub base_dir: Option<PathBuf>,
}

fn params<T: for<'de> Deserialize<'de> + Default>(value: &Value) -> Result<T, CostError> {
    if value.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(value.clone()).map_err(|e| CostError::Parameter(e.to_string()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeinichParams {
    #[serde(default = "default_h")]
    h: String,
    #[serde(default = "one")]
    scale: f64,
}

impl Default for HeinichParams {
    fn default() -> Self {
        Self { h: default_h(), scale: 1.0 }
    }
}

fn default_h() -> String {
    "neg_quadratic".into()
}

fn one() -> f64 {
    1.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainParams {
    #[serde(default = "default_g")]
    g: String,
    #[serde(default = "one")]
    scale: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self { g: default_g(), scale: 1.0 }
    }
}

fn default_g() -> String {
    "zero".into()
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct InfimalParams {
    #[serde(default)]
    partition: Option<Vec<usize>>,
    #[serde(default)]
    parts: Option<String>,
    #[serde(default)]
    exact_barycenter: bool,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TabulatedParams {
    path: PathBuf,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CustomParams {
    name: String,
    #[serde(default)]
    scale: Option<f64>,
    #[serde(default)]
    epsilon: Option<f64>,
}

impl CostSpec {
    pub fn block_dims(&self) -> Result<Vec<usize>, CostError> {
        match self.d.len() {
            1 => Ok(vec![self.d[0]; self.m]),
            n if n == self.m => Ok(self.d.clone()),
            n => Err(CostError::Parameter(format!("d has {n} entries for m = {}", self.m))),
        }
    }

    fn uniform_dim(&self) -> Result<usize, CostError> {
        let dims = self.block_dims()?;
        if dims.iter().any(|&d| d != dims[0]) {
            return Err(CostError::Parameter(format!("{:?} needs equal block dimensions", self.kind)));
        }
        Ok(dims[0])
    }

    pub fn domain(&self) -> BoxSpec {
        self.domain.unwrap_or_default()
    }

    /// Boxes for the `m` marginal spaces from [`CostSpec::domain`].
    pub fn spaces(&self) -> Result<Vec<Space>, CostError> {
        let b = self.domain();
        self.block_dims()?
            .into_iter()
            .map(|d| Space::cube(d, b.lower, b.upper).map_err(|e| CostError::Parameter(e.to_string())))
            .collect()
    }

    pub fn build(&self, ctx: &BuildContext<'_>) -> Result<CostFunction, CostError> {
        let dims = self.block_dims()?;
        match self.kind {
            CostKind::GangboSwiech => CostFunction::gangbo_swiech(self.m, self.uniform_dim()?),
            CostKind::Heinich => {
                let p: HeinichParams = params(&self.params)?;
                let h = match p.h.as_str() {
                    "neg_quadratic" => ScalarField::neg_quadratic(p.scale),
                    "neg_cosh" => ScalarField::neg_cosh(),
                    other => return Err(CostError::Parameter(format!("unknown h {other:?}"))),
                };
                CostFunction::heinich(self.m, self.uniform_dim()?, h)
            }
            CostKind::ChainBilinear => {
                if self.m != 3 {
                    return Err(CostError::Parameter("chain_bilinear has m = 3".into()));
                }
                let p: ChainParams = params(&self.params)?;
                let g = match p.g.as_str() {
                    "zero" => PairField::zero(),
                    "product" => PairField::product(p.scale),
                    other => return Err(CostError::Parameter(format!("unknown g {other:?}"))),
                };
                CostFunction::chain_bilinear(self.uniform_dim()?, g)
            }
            CostKind::Matching | CostKind::InfimalConvolution => {
                let p: InfimalParams = params(&self.params)?;
                let y = self
                    .y_domain
                    .as_ref()
                    .ok_or_else(|| CostError::Parameter("infimal costs need a y_domain".into()))?
                    .build()?;
                let partition = match (self.kind, p.partition) {
                    (CostKind::Matching, _) | (_, None) => BlockPartition::singletons(self.m)?,
                    (_, Some(b)) => BlockPartition::new(b)?,
                };
                if partition.arity() != self.m {
                    return Err(CostError::Partition { covered: partition.arity(), arity: self.m });
                }
                match p.parts.as_deref().unwrap_or("quadratic") {
                    "quadratic" => {}
                    other => return Err(CostError::Parameter(format!("unknown parts {other:?}"))),
                }
                let ydim = y.space().dim();
                let mut parts = Vec::with_capacity(partition.blocks());
                for j in 0..partition.blocks() {
                    let block = &dims[partition.range(j)];
                    if block.iter().any(|&d| d != ydim) {
                        return Err(CostError::Parameter("quadratic parts need d = dim Y".into()));
                    }
                    parts.push(block_squared_distance(block.len(), ydim)?);
                }
                let cost = if self.kind == CostKind::Matching {
                    CostFunction::matching_cost(parts, y)?
                } else {
                    CostFunction::infimal_convolution(parts, partition, y)?
                };
                if p.exact_barycenter {
                    cost.with_exact_minimizer(super::ExactMinimizer::barycenter())
                } else {
                    Ok(cost)
                }
            }
            CostKind::Tabulated => {
                let p: TabulatedParams = params(&self.params)?;
                let system = ctx.system.ok_or_else(|| {
                    CostError::Parameter("tabulated costs need marginals to bind to".into())
                })?;
                let path = resolve(&p.path, ctx.base_dir.as_deref());
                let (shape, values) = read_tensor_file(&path)?;
                if shape != system.shape() {
                    return Err(CostError::TensorFile(format!(
                        "table shape {shape:?} does not match marginals {:?}",
                        system.shape()
                    )));
                }
                Ok(CostFunction::tabulated(TabulatedCost::from_system(system, values)?))
            }
            CostKind::Custom => {
                let p: CustomParams = params(&self.params)?;
                match p.name.as_str() {
                    "pairwise_inner" => pairwise_inner(self.m, self.uniform_dim()?, p.scale.unwrap_or(1.0)),
                    "independent_of_last" => independent_of_last(self.m, self.uniform_dim()?),
                    "gangbo_swiech_cubic" => {
                        gangbo_swiech_cubic(self.m, p.epsilon.unwrap_or(0.1))
                    }
                    other => Err(CostError::Parameter(format!("unknown custom cost {other:?}"))),
                }
            }
        }
    }
}

fn resolve(path: &Path, base: Option<&Path>) -> PathBuf {
    match base {
        Some(b) if path.is_relative() => b.join(path),
        _ => path.to_path_buf(),
    }
}

/// `c(z_1, …, z_n, y) = Σ_i |z_i − y|²`, the quadratic part of an infimal
/// convolution with a block of `n` points.
pub fn block_squared_distance(n: usize, d: usize) -> Result<CostFunction, CostError> {
    if n == 1 {
        return CostFunction::gangbo_swiech(2, d);
    }
    CostFunction::custom(
        vec![d; n + 1],
        CustomCost::new("block_squared_distance", |x: &[&[f64]]| {
            let y = x[x.len() - 1];
            x[..x.len() - 1]
                .iter()
                .map(|z| z.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum()
        })
        .with_gradient(|x: &[&[f64]], i| {
            let last = x.len() - 1;
            let y = x[last];
            if i < last {
                x[i].iter().zip(y).map(|(a, b)| 2.0 * (a - b)).collect()
            } else {
                let mut g = vec![0.0; y.len()];
                for z in &x[..last] {
                    for (acc, (a, b)) in g.iter_mut().zip(z.iter().zip(y)) {
                        *acc += 2.0 * (b - a);
                    }
                }
                g
            }
        })
        .with_hessian(move |x: &[&[f64]], i, j| {
            let last = x.len() - 1;
            let v = match (i == last, j == last) {
                (true, true) => 2.0 * last as f64,
                (false, false) if i == j => 2.0,
                (false, false) => 0.0,
                _ => -2.0,
            };
            DMatrix::from_diagonal_element(d, d, v)
        }),
    )
}

/// `c(x) = k Σ_{i<j} x_i·x_j`.
pub fn pairwise_inner(m: usize, d: usize, scale: f64) -> Result<CostFunction, CostError> {
    CostFunction::custom(
        vec![d; m],
        CustomCost::new(format!("pairwise_inner({scale})"), move |x: &[&[f64]]| {
            let mut total = 0.0;
            for i in 0..x.len() {
                for j in i + 1..x.len() {
                    total += x[i].iter().zip(x[j]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            scale * total
        })
        .with_gradient(move |x: &[&[f64]], i| {
            let mut g = vec![0.0; x[i].len()];
            for (j, p) in x.iter().enumerate() {
                if j != i {
                    for (acc, v) in g.iter_mut().zip(p.iter()) {
                        *acc += scale * v;
                    }
                }
            }
            g
        })
        .with_hessian(move |_, i, j| {
            DMatrix::from_diagonal_element(d, d, if i == j { 0.0 } else { scale })
        }),
    )
}

/// Pairwise quadratic cost on the first `m − 1` blocks plus `|x_1|²`; constant
/// in the last block.
pub fn independent_of_last(m: usize, d: usize) -> Result<CostFunction, CostError> {
    if m < 2 {
        return Err(CostError::Parameter("independent_of_last needs m ≥ 2".into()));
    }
    let head = CostFunction::gangbo_swiech(m.max(3) - 1, d)?;
    CostFunction::custom(
        vec![d; m],
        CustomCost::new("independent_of_last", move |x: &[&[f64]]| {
            let first: f64 = x[0].iter().map(|v| v * v).sum();
            let rest = if m > 2 { head.eval_unchecked(&x[..m - 1]).unwrap_or(0.0) } else { 0.0 };
            first + rest
        }),
    )
}

/// One-dimensional `Σ_{i<j} |x_i − x_j|² + ε x_2³`, with exact derivatives.
pub fn gangbo_swiech_cubic(m: usize, epsilon: f64) -> Result<CostFunction, CostError> {
    if m < 3 {
        return Err(CostError::Parameter("gangbo_swiech_cubic needs m ≥ 3".into()));
    }
    let base = CostFunction::gangbo_swiech(m, 1)?;
    let for_value = base.clone();
    let for_grad = base.clone();
    CostFunction::custom(
        vec![1; m],
        CustomCost::new(format!("gangbo_swiech_cubic({epsilon})"), move |x: &[&[f64]]| {
            for_value.eval_unchecked(x).unwrap_or(f64::NAN) + epsilon * x[1][0].powi(3)
        })
        .with_gradient(move |x: &[&[f64]], i| {
            let mut g = for_grad.grad_block(x, i).ok().and_then(|g| g.gradient().map(<[f64]>::to_vec));
            let g = g.get_or_insert_with(|| vec![f64::NAN]);
            if i == 1 {
                g[0] += 3.0 * epsilon * x[1][0] * x[1][0];
            }
            g.clone()
        })
        .with_hessian(move |x: &[&[f64]], i, j| {
            let mut h = base.analytic_second(x, i, j).expect("pairwise quadratic is analytic");
            if i == 1 && j == 1 {
                h[(0, 0)] += 6.0 * epsilon * x[1][0];
            }
            h
        }),
    )
}
