use std::collections::BTreeMap;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

use mmot_core::costs::spec::{BuildContext, CostSpec};
use mmot_core::costs::YDomain;
use mmot_core::twistcheck::{
    nondegeneracy_check, one_m_twist_check, sample_tuples, tensor_t_scan, ClosestPair, HessianMode,
    NondegeneracyReport, DET_THRESHOLD, EIGEN_MARGIN, GRAD_TOL, POINT_TOL, SAMPLING_CAVEAT,
};

use crate::pipeline::Verdict;

/// Target size of the `x_m` grid in the (1,m)-twist check.
const GRID_POINTS: f64 = 400.0;
const MAX_FIXINGS: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct OneMSummary {
    pub fixings: usize,
    pub grid_points: usize,
    pub injective: bool,
    pub collisions: usize,
    pub nondifferentiable_excluded: usize,
    pub closest: Option<ClosestPair>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TwistAudit {
    pub version: &'static str,
    pub cost: CostSpec,
    pub samples: usize,
    pub seed: u64,
    pub nondegeneracy: NondegeneracyReport,
    pub one_m_twist: OneMSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tensors: Option<Value>,
    pub verdicts: BTreeMap<&'static str, Verdict>,
    pub passed: bool,
    pub caveat: &'static str,
}

impl TwistAudit {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            2
        }
    }
}

/// Sample (1,m)-non-degeneracy, (1,m)-twist, and for `m ≥ 3` the sign of `T`.
pub fn twist_audit(spec: &CostSpec, samples: usize, seed: u64) -> Result<TwistAudit> {
    anyhow::ensure!(samples > 0, "samples must be positive");
    let cost = spec.build(&BuildContext::default()).context("building cost")?;
    let m = cost.arity();
    let spaces = spec.spaces()?;
    let mut verdicts = BTreeMap::new();
    let pass = |ok: bool| if ok { Verdict::Pass } else { Verdict::Fail };

    let tuples = sample_tuples(&spaces, samples, seed);
    let nondegeneracy = nondegeneracy_check(&cost, &tuples, DET_THRESHOLD, HessianMode::Auto)?;
    verdicts.insert("nondegeneracy", pass(nondegeneracy.passed));

    let last = &spaces[m - 1];
    let per_axis = (GRID_POINTS.powf(1.0 / last.dim() as f64).floor() as usize).max(2);
    let grid = YDomain::regular(last.clone(), per_axis)?.grid().to_vec();
    let mut one_m = OneMSummary {
        fixings: 0,
        grid_points: grid.len(),
        injective: true,
        collisions: 0,
        nondifferentiable_excluded: 0,
        closest: None,
    };
    for tuple in tuples.iter().take(MAX_FIXINGS) {
        let r = one_m_twist_check(&cost, &tuple[..m - 1], &grid, GRAD_TOL, POINT_TOL)?;
        one_m.fixings += 1;
        one_m.injective &= r.injective;
        one_m.collisions += r.collisions;
        one_m.nondifferentiable_excluded += r.nondifferentiable_excluded;
        if let Some(c) = r.closest {
            if one_m.closest.as_ref().is_none_or(|b| c.gradient_distance < b.gradient_distance) {
                one_m.closest = Some(c);
            }
        }
    }
    verdicts.insert("one_m_twist", pass(one_m.injective));

    let tensors = if m >= 3 {
        let r = tensor_t_scan(&cost, &spaces, samples, 1, seed.wrapping_add(1), HessianMode::Auto, EIGEN_MARGIN)?;
        let verdict = match (r.negative_on_samples, r.reports.is_empty()) {
            (true, _) => Verdict::Pass,
            (false, true) => Verdict::Inconclusive,
            (false, false) => Verdict::Fail,
        };
        verdicts.insert("tensors", verdict);
        let mut v = serde_json::to_value(&r)?;
        v.as_object_mut().map(|o| o.remove("reports"));
        v["evaluated"] = r.reports.len().into();
        Some(v)
    } else {
        None
    };

    let passed = verdicts.values().all(|v| *v != Verdict::Fail);
    Ok(TwistAudit {
        version: env!("CARGO_PKG_VERSION"),
        cost: spec.clone(),
        samples,
        seed,
        nondegeneracy,
        one_m_twist: one_m,
        tensors,
        verdicts,
        passed,
        caveat: SAMPLING_CAVEAT,
    })
}
