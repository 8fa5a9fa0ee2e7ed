use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use mmot_core::costs::CostFunction;
use mmot_core::measures::MarginalSystem;
use mmot_core::monotonicity::{
    certify_splitting, is_cyclically_monotone, projected_set, verify_splitting_tensor, MonotonicityReport,
    SplittingVerdict, SupportSet,
};
use mmot_core::solver::{
    build_cost_tensor_capped, solve_entropic, solve_exact_lp_with, uniqueness_probe, Coupling, CostTensor,
    Degeneracy, EntropicReport, Iterations, LpOptions, ProbeVerdict, SolveReport,
};
use mmot_core::twistcheck::{check_twist_on_support, graph_check, tensor_t_scan};

use crate::config::{Check, ExperimentConfig, SolverChoice};

/// Entries of an entropic plan kept when it is turned into a coupling.
const ENTROPIC_SUPPORT_THRESHOLD: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    /// No violation found, but the check did not cover everything requested.
    Partial,
    Inconclusive,
    Fail,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub check: &'static str,
    pub verdict: Verdict,
    pub details: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub solver: &'static str,
    pub objective: f64,
    pub support_size: usize,
    pub marginal_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<ExactSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropic: Option<EntropicReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExactSummary {
    pub dual: f64,
    pub gap: f64,
    pub gap_ok: bool,
    pub vertex_bound: usize,
    pub iterations: Iterations,
    pub degeneracy: Degeneracy,
}

/// Timing and environment data; everything else in a report is a pure
/// function of the config.
#[derive(Debug, Clone, Serialize)]
pub struct RunInfo {
    pub unix_time: u64,
    pub tensor_cap: usize,
    pub seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub version: &'static str,
    pub config: ExperimentConfig,
    pub solve: SolveSummary,
    pub checks: Vec<CheckOutcome>,
    pub passed: bool,
    pub run_info: RunInfo,
}

impl RunReport {
    /// 0 when nothing failed, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            2
        }
    }

    pub fn verdict(&self, check: &str) -> Option<Verdict> {
        self.checks.iter().find(|c| c.check == check).map(|c| c.verdict)
    }
}

struct Solved {
    coupling: Coupling,
    exact: Option<SolveReport>,
    summary: SolveSummary,
}

fn solve(tensor: &CostTensor, system: &MarginalSystem, choice: &SolverChoice) -> Result<Solved> {
    match *choice {
        SolverChoice::Exact { order } => {
            let options = LpOptions { order, ..LpOptions::default() };
            let report = solve_exact_lp_with(tensor, system, options)?;
            let summary = SolveSummary {
                solver: "exact",
                objective: report.primal,
                support_size: report.coupling.len(),
                marginal_residual: report.coupling.marginal_residual(),
                exact: Some(ExactSummary {
                    dual: report.dual,
                    gap: report.gap,
                    gap_ok: report.gap_ok(),
                    vertex_bound: report.vertex_bound,
                    iterations: report.iterations,
                    degeneracy: report.degeneracy,
                }),
                entropic: None,
            };
            Ok(Solved { coupling: report.coupling.clone(), exact: Some(report), summary })
        }
        SolverChoice::Entropic { epsilon, max_iter, tol } => {
            let (plan, report) = solve_entropic(tensor, system, epsilon, max_iter, tol)?;
            let coupling = plan
                .to_coupling(Arc::new(system.clone()), ENTROPIC_SUPPORT_THRESHOLD)
                .context("entropic plan does not meet the marginal tolerance; raise max_iter or epsilon")?;
            let summary = SolveSummary {
                solver: "entropic",
                objective: coupling.cost(tensor),
                support_size: coupling.len(),
                marginal_residual: coupling.marginal_residual(),
                exact: None,
                entropic: Some(report),
            };
            Ok(Solved { coupling, exact: None, summary })
        }
    }
}

fn monotone_verdict(r: &MonotonicityReport) -> Verdict {
    match (r.monotone, r.complete) {
        (false, _) => Verdict::Fail,
        (true, true) => Verdict::Pass,
        (true, false) => Verdict::Partial,
    }
}

fn pass_if(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

struct Stage<'a> {
    config: &'a ExperimentConfig,
    system: &'a MarginalSystem,
    cost: &'a CostFunction,
    tensor: &'a CostTensor,
    solved: &'a Solved,
}

fn run_check(ctx: &Stage<'_>, check: &Check) -> Result<(Verdict, Value)> {
    let tol = &ctx.config.tolerances;
    let coupling = &ctx.solved.coupling;
    Ok(match check {
        Check::Splitting => match &ctx.solved.exact {
            Some(report) => {
                let check = verify_splitting_tensor(ctx.tensor, &coupling.support(), &report.potentials, tol.certificate)?;
                let gap_ok = report.gap.abs() <= tol.certificate * (1.0 + report.primal.abs());
                (pass_if(check.certified && gap_ok), json!({ "gap": report.gap, "gap_ok": gap_ok, "check": check }))
            }
            None => {
                let r = certify_splitting(ctx.tensor, ctx.system, &coupling.support(), tol.certificate)?;
                let verdict = pass_if(r.verdict == SplittingVerdict::Certified);
                (verdict, json!({ "verdict": r.verdict, "excess": r.excess, "check": r.check }))
            }
        },
        Check::Monotone { n } => {
            let r = is_cyclically_monotone(&SupportSet::from_coupling(coupling), ctx.cost, *n, tol.budget)?;
            (monotone_verdict(&r), serde_json::to_value(&r)?)
        }
        Check::OrderTwo => {
            let r = is_cyclically_monotone(&SupportSet::from_coupling(coupling), ctx.cost, 2, tol.budget)?;
            (monotone_verdict(&r), serde_json::to_value(&r)?)
        }
        Check::Twist => {
            let r = check_twist_on_support(ctx.cost, coupling, tol.grad, tol.point)?;
            (pass_if(r.passed()), serde_json::to_value(&r)?)
        }
        Check::Graph => {
            let r = graph_check(coupling);
            let degeneracy = ctx.solved.exact.as_ref().map(|s| s.degeneracy);
            (pass_if(r.is_graph), json!({ "graph": r, "degeneracy": degeneracy }))
        }
        Check::Uniqueness { trials, magnitude } => {
            let r = uniqueness_probe(ctx.tensor, ctx.system, *trials, *magnitude, ctx.config.seed)?;
            let verdict = match r.verdict {
                ProbeVerdict::Unique => Verdict::Pass,
                ProbeVerdict::NonUnique => Verdict::Fail,
                ProbeVerdict::Inconclusive => Verdict::Inconclusive,
            };
            (verdict, serde_json::to_value(&r)?)
        }
        Check::Tensors { samples, anchors, mode } => {
            let seed = ctx.config.seed.wrapping_add(1);
            let spaces = ctx.system.spaces();
            let r = tensor_t_scan(ctx.cost, &spaces, *samples, *anchors, seed, *mode, tol.eigen_margin)?;
            let mut details = serde_json::to_value(&r)?;
            details.as_object_mut().map(|o| o.remove("reports"));
            details["evaluated"] = json!(r.reports.len());
            let verdict = match (r.negative_on_samples, r.reports.is_empty()) {
                (true, _) => Verdict::Pass,
                (false, true) => Verdict::Inconclusive,
                (false, false) => Verdict::Fail,
            };
            (verdict, details)
        }
        Check::Projections { block, n } => {
            let part = &ctx.cost.parts()?[*block];
            let set = projected_set(coupling, ctx.cost, *block)?;
            let r = is_cyclically_monotone(&set, part, *n, tol.budget)?;
            (monotone_verdict(&r), json!({ "block": block, "points": set.len(), "report": r }))
        }
    })
}

/// Solve, then run every requested check in pipeline order.
pub fn run(config: &ExperimentConfig, base_dir: Option<&Path>, tensor_cap: usize) -> Result<(RunReport, Coupling)> {
    let mut seconds = BTreeMap::new();
    let clock = Instant::now();
    let (system, cost) = config.build(base_dir)?;
    let tensor = build_cost_tensor_capped(&system, &cost, tensor_cap)?;
    seconds.insert("setup".to_string(), clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    let solved = solve(&tensor, &system, &config.solver)?;
    seconds.insert("solve".to_string(), clock.elapsed().as_secs_f64());

    let ctx = Stage { config, system: &system, cost: &cost, tensor: &tensor, solved: &solved };
    let mut checks = Vec::with_capacity(config.checks.len());
    for check in &config.checks {
        let clock = Instant::now();
        let (verdict, details) = run_check(&ctx, check).with_context(|| format!("check {}", check.name()))?;
        seconds.insert(check.name().to_string(), clock.elapsed().as_secs_f64());
        checks.push(CheckOutcome { check: check.name(), verdict, details });
    }
    let passed = checks.iter().all(|c| c.verdict != Verdict::Fail);
    let unix_time = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION"),
        config: config.clone(),
        solve: solved.summary.clone(),
        checks,
        passed,
        run_info: RunInfo { unix_time, tensor_cap, seconds },
    };
    Ok((report, solved.coupling))
}

pub fn write_outputs(config: &ExperimentConfig, report: &RunReport, coupling: &Coupling) -> Result<()> {
    if let Some(path) = &config.output.coupling {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        coupling.write_csv(BufWriter::new(file))?;
    }
    if let Some(path) = &config.output.report {
        let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        serde_json::to_writer_pretty(&mut out, report)?;
        writeln!(out)?;
    }
    Ok(())
}
