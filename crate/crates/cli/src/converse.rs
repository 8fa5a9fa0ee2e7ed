//! Random search for finite sets that are c-cyclically monotone but not
//! certified as splitting, for `m ≥ 4`.

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mmot_core::costs::spec::{BuildContext, CostSpec};
use mmot_core::monotonicity::{certify_splitting, is_cyclically_monotone, SplittingVerdict, SupportSet, DEFAULT_BUDGET};
use mmot_core::solver::build_cost_tensor_capped;

use crate::config::MarginalsSpec;

const CERTIFY_TOL: f64 = 1e-9;
const NOTE: &str = "candidates are monotone up to the checked N and were not certified as splitting at the stated \
     tolerance; they are leads for manual study, not disproofs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConverseSpec {
    pub cost: CostSpec,
    pub marginals: MarginalsSpec,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Points per sampled set.
    #[serde(default = "default_set_size")]
    pub set_size: usize,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
}

fn default_set_size() -> usize {
    4
}

fn default_n_max() -> usize {
    3
}

#[derive(Debug, Clone, Serialize)]
pub struct Candidate {
    pub trial: usize,
    pub tuples: Vec<Vec<usize>>,
    pub points: Vec<Vec<Vec<f64>>>,
    /// Cost excess of the uniform plan on the set over its own optimum.
    pub excess: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Counts {
    pub sampled: usize,
    pub not_monotone: usize,
    /// Monotone with the budget exhausted before `n_max`.
    pub partially_checked: usize,
    pub monotone: usize,
    pub certified: usize,
    pub uncertified: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConverseReport {
    pub version: &'static str,
    pub spec: ConverseSpec,
    pub counts: Counts,
    pub candidates: Vec<Candidate>,
    pub note: &'static str,
}

pub fn converse_search(spec: &ConverseSpec, tensor_cap: usize) -> Result<ConverseReport> {
    let m = spec.cost.m;
    if m < 4 {
        bail!("converse search needs m ≥ 4; for m ≤ 3 the converse is already settled (got m = {m})");
    }
    if spec.set_size < 2 {
        bail!("set_size must be at least 2");
    }
    let mut report = ConverseReport {
        version: env!("CARGO_PKG_VERSION"),
        spec: spec.clone(),
        counts: Counts::default(),
        candidates: Vec::new(),
        note: NOTE,
    };
    if spec.trials == 0 {
        return Ok(report);
    }
    let system = spec.marginals.build().context("building marginals")?;
    if system.arity() != m {
        bail!("{} marginals for a cost of arity {m}", system.arity());
    }
    let ctx = BuildContext { system: Some(&system), base_dir: None };
    let cost = spec.cost.build(&ctx).context("building cost")?;
    let tensor = build_cost_tensor_capped(&system, &cost, tensor_cap)?;
    let shape = system.shape();
    let available: usize = shape.iter().product();
    if spec.set_size > available {
        bail!("set_size {} exceeds the {available} atom tuples", spec.set_size);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for trial in 0..spec.trials {
        let mut tuples: Vec<Vec<usize>> = Vec::with_capacity(spec.set_size);
        while tuples.len() < spec.set_size {
            let t: Vec<usize> = shape.iter().map(|&n| rng.gen_range(0..n)).collect();
            if !tuples.contains(&t) {
                tuples.push(t);
            }
        }
        report.counts.sampled += 1;
        let set = SupportSet::from_indices(&system, &tuples)?;
        let mono = is_cyclically_monotone(&set, &cost, spec.n_max, DEFAULT_BUDGET)?;
        if !mono.monotone {
            report.counts.not_monotone += 1;
            continue;
        }
        if !mono.complete {
            report.counts.partially_checked += 1;
            continue;
        }
        report.counts.monotone += 1;
        let cert = certify_splitting(&tensor, &system, &tuples, CERTIFY_TOL)?;
        if cert.verdict == SplittingVerdict::Certified {
            report.counts.certified += 1;
        } else {
            report.counts.uncertified += 1;
            report.candidates.push(Candidate {
                trial,
                points: set.points().to_vec(),
                tuples,
                excess: cert.excess,
            });
        }
    }
    Ok(report)
}
