use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mmot_core::costs::spec::{BuildContext, CostSpec};
use mmot_core::costs::{CostFunction, CostKind};
use mmot_core::measures::{nested_quantile_system, MarginalSystem, MeasureSpec, Space};
use mmot_core::monotonicity::DEFAULT_BUDGET;
use mmot_core::solver::{PivotOrder, DEFAULT_PROBE_MAGNITUDE};
use mmot_core::twistcheck::{HessianMode, DET_THRESHOLD, EIGEN_MARGIN, GRAD_TOL, POINT_TOL};

/// Marginals listed one by one, or a nested-quantile family in one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MarginalsSpec {
    List(Vec<MeasureSpec>),
    Nested { nested: NestedSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NestedSpec {
    pub counts: Vec<usize>,
    #[serde(default)]
    pub lower: f64,
    #[serde(default = "one")]
    pub upper: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl MarginalsSpec {
    pub fn build(&self) -> Result<MarginalSystem> {
        match self {
            MarginalsSpec::List(specs) => {
                let measures = specs.iter().map(|s| s.build()).collect::<Result<Vec<_>, _>>()?;
                Ok(MarginalSystem::new(measures)?)
            }
            MarginalsSpec::Nested { nested } => {
                let space = Space::interval(nested.lower, nested.upper)?;
                Ok(nested_quantile_system(&space, &nested.counts, nested.seed)?)
            }
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            MarginalsSpec::List(specs) => specs.len(),
            MarginalsSpec::Nested { nested } => nested.counts.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SolverChoice {
    Exact {
        #[serde(default)]
        order: PivotOrder,
    },
    Entropic {
        epsilon: f64,
        #[serde(default = "default_max_iter")]
        max_iter: usize,
        #[serde(default = "default_entropic_tol")]
        tol: f64,
    },
}

impl Default for SolverChoice {
    fn default() -> Self {
        SolverChoice::Exact { order: PivotOrder::Forward }
    }
}

fn default_max_iter() -> usize {
    10_000
}

fn default_entropic_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Splitting,
    Monotone {
        n: usize,
    },
    OrderTwo,
    Twist,
    Graph,
    Uniqueness {
        trials: usize,
        #[serde(default = "default_magnitude")]
        magnitude: f64,
    },
    Tensors {
        samples: usize,
        #[serde(default = "one_usize")]
        anchors: usize,
        #[serde(default)]
        mode: HessianMode,
    },
    Projections {
        block: usize,
        #[serde(default = "three")]
        n: usize,
    },
}

fn default_magnitude() -> f64 {
    DEFAULT_PROBE_MAGNITUDE
}

fn one_usize() -> usize {
    1
}

fn three() -> usize {
    3
}

impl Check {
    pub fn name(&self) -> &'static str {
        match self {
            Check::Splitting => "splitting",
            Check::Monotone { .. } => "monotone",
            Check::OrderTwo => "order_two",
            Check::Twist => "twist",
            Check::Graph => "graph",
            Check::Uniqueness { .. } => "uniqueness",
            Check::Tensors { .. } => "tensors",
            Check::Projections { .. } => "projections",
        }
    }

    /// Position in the fixed pipeline.
    pub fn stage(&self) -> usize {
        match self {
            Check::Splitting => 0,
            Check::Monotone { .. } | Check::OrderTwo => 1,
            Check::Twist => 2,
            Check::Graph => 3,
            Check::Uniqueness { .. } => 4,
            Check::Tensors { .. } => 5,
            Check::Projections { .. } => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative duality gap and splitting residual.
    pub certificate: f64,
    pub grad: f64,
    pub point: f64,
    pub eigen_margin: f64,
    pub det: f64,
    /// Permutation sums allowed per monotonicity check.
    pub budget: u64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            certificate: 1e-7,
            grad: GRAD_TOL,
            point: POINT_TOL,
            eigen_margin: EIGEN_MARGIN,
            det: DET_THRESHOLD,
            budget: DEFAULT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub report: Option<PathBuf>,
    pub coupling: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub marginals: MarginalsSpec,
    pub cost: CostSpec,
    #[serde(default)]
    pub solver: SolverChoice,
    #[serde(default)]
    pub checks: Vec<Check>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputPaths,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(dir) = path.parent() {
            config.output.rebase(dir);
        }
        config.validate()?;
        Ok(config)
    }

    /// Checks sorted into pipeline order; each kind at most once.
    pub fn validate(&mut self) -> Result<()> {
        let m = self.cost.m;
        if self.marginals.arity() != m {
            bail!("{} marginals for a cost of arity {m}", self.marginals.arity());
        }
        let mut seen = BTreeSet::new();
        for check in &self.checks {
            if !seen.insert(check.name()) {
                bail!("check {:?} requested twice", check.name());
            }
            match check {
                Check::Monotone { n } if *n < 2 => bail!("monotone needs N ≥ 2, got {n}"),
                Check::Uniqueness { trials, .. } if *trials < 2 => {
                    bail!("uniqueness needs at least 2 trials, got {trials}")
                }
                Check::Tensors { samples, .. } if *samples == 0 => bail!("tensors needs samples ≥ 1"),
                Check::Tensors { .. } if m < 3 => bail!("tensors need m ≥ 3, the cost has m = {m}"),
                Check::Projections { block, n } => {
                    if !matches!(self.cost.kind, CostKind::Matching | CostKind::InfimalConvolution) {
                        bail!("projections need an infimal-convolution cost");
                    }
                    let blocks = match self.cost.params.get("partition") {
                        Some(p) if self.cost.kind == CostKind::InfimalConvolution && !p.is_null() => {
                            p.as_array().map_or(0, Vec::len)
                        }
                        _ => m,
                    };
                    if *block >= blocks {
                        bail!("projection block {block} out of range ({blocks} blocks)");
                    }
                    if *n < 2 {
                        bail!("projections need N ≥ 2, got {n}");
                    }
                }
                _ => {}
            }
        }
        if let SolverChoice::Entropic { epsilon, .. } = self.solver {
            if !(epsilon > 0.0) {
                bail!("entropic epsilon must be positive, got {epsilon}");
            }
        }
        self.checks.sort_by_key(Check::stage);
        Ok(())
    }

    pub fn build(&self, base_dir: Option<&Path>) -> Result<(MarginalSystem, CostFunction)> {
        let system = self.marginals.build().context("building marginals")?;
        let ctx = BuildContext { system: Some(&system), base_dir: base_dir.map(Path::to_path_buf) };
        let cost = self.cost.build(&ctx).context("building cost")?;
        if cost.block_dims() != system.dims() {
            bail!("cost block dimensions {:?} do not match marginals {:?}", cost.block_dims(), system.dims());
        }
        Ok((system, cost))
    }
}

impl OutputPaths {
    fn rebase(&mut self, dir: &Path) {
        for p in [&mut self.report, &mut self.coupling].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}
