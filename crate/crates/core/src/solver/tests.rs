use std::sync::Arc;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::costs::CostFunction;
use crate::measures::{random_generic_measure, random_uniform_measure, DiscreteMeasure, Space};

fn line(atoms: &[f64]) -> DiscreteMeasure {
    let space = Space::interval(-10.0, 10.0).unwrap();
    DiscreteMeasure::uniform(space, atoms.iter().map(|&a| vec![a]).collect()).unwrap()
}

fn binary_system(m: usize) -> MarginalSystem {
    MarginalSystem::new(vec![line(&[0.0, 1.0]); m]).unwrap()
}

fn tensor_from(system: &MarginalSystem, f: impl Fn(&[usize]) -> f64) -> CostTensor {
    let shape = system.shape();
    let mut values = Vec::new();
    for_each_index(&shape, |_, index| values.push(f(index)));
    CostTensor::new(shape, values).unwrap()
}

/// All permutations of `0..n` by repeated insertion.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut perms = vec![Vec::new()];
    for k in 0..n {
        let mut next = Vec::new();
        for p in &perms {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k);
                next.push(q);
            }
        }
        perms = next;
    }
    perms
}

/// Minimum over permutation plans for uniform `n`-point marginals.
fn brute_force(tensor: &CostTensor, m: usize, n: usize) -> f64 {
    let perms = permutations(n);
    let mut best = f64::INFINITY;
    let mut choice = vec![0usize; m - 1];
    loop {
        let total: f64 = (0..n)
            .map(|k| {
                let mut index = vec![k];
                index.extend(choice.iter().map(|&p| perms[p][k]));
                tensor.get(&index)
            })
            .sum();
        best = best.min(total / n as f64);
        let mut slot = 0;
        loop {
            if slot == choice.len() {
                return best;
            }
            choice[slot] += 1;
            if choice[slot] < perms.len() {
                break;
            }
            choice[slot] = 0;
            slot += 1;
        }
    }
}

#[test]
fn two_point_quadratic_tensor() {
    let system = binary_system(2);
    let tensor = build_cost_tensor(&system, &CostFunction::gangbo_swiech(2, 1).unwrap()).unwrap();
    assert_eq!(tensor.values(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn three_marginal_tensor_entry() {
    let system = binary_system(3);
    let tensor = build_cost_tensor(&system, &CostFunction::gangbo_swiech(3, 1).unwrap()).unwrap();
    assert_eq!(tensor.get(&[0, 1, 1]), 2.0);
}

#[test]
fn tensor_cap_contract() {
    let cost2 = CostFunction::gangbo_swiech(2, 1).unwrap();
    let cost3 = CostFunction::gangbo_swiech(3, 1).unwrap();
    let three = MarginalSystem::new(vec![line(&[0.0, 1.0, 2.0]); 2]).unwrap();
    assert!(build_cost_tensor_capped(&three, &cost2, 9).is_ok());
    assert!(matches!(build_cost_tensor_capped(&three, &cost2, 8), Err(SolverError::TensorCap { size: 9, cap: 8 })));
    assert!(build_cost_tensor_capped(&binary_system(3), &cost3, 8).is_ok());
    let cube = MarginalSystem::new(vec![line(&[0.0, 1.0, 2.0]); 3]).unwrap();
    assert!(matches!(build_cost_tensor_capped(&cube, &cost3, 8), Err(SolverError::TensorCap { .. })));
}

#[test]
fn arity_mismatch_rejected() {
    let err = build_cost_tensor(&binary_system(2), &CostFunction::gangbo_swiech(3, 1).unwrap());
    assert!(matches!(err, Err(SolverError::Cost(_))));
}

#[test]
fn quadratic_pairs_identity() {
    let system = binary_system(2);
    let tensor = tensor_from(&system, |a| (a[0] as f64 - a[1] as f64).powi(2));
    let report = solve_exact_lp(&tensor, &system).unwrap();
    assert_eq!(report.coupling.support(), vec![vec![0, 0], vec![1, 1]]);
    assert_abs_diff_eq!(report.primal, 0.0, epsilon = 1e-12);
}

#[test]
fn negative_quadratic_pairs_antidiagonal() {
    let system = binary_system(2);
    let tensor = tensor_from(&system, |a| -(a[0] as f64 - a[1] as f64).powi(2));
    let report = solve_exact_lp(&tensor, &system).unwrap();
    assert_eq!(report.coupling.support(), vec![vec![0, 1], vec![1, 0]]);
    assert_abs_diff_eq!(report.primal, brute_force(&tensor, 2, 2), epsilon = 1e-12);
    assert_abs_diff_eq!(report.primal, -1.0, epsilon = 1e-12);
}

#[test]
fn three_marginal_diagonal() {
    let system = binary_system(3);
    let tensor = build_cost_tensor(&system, &CostFunction::gangbo_swiech(3, 1).unwrap()).unwrap();
    let report = solve_exact_lp(&tensor, &system).unwrap();
    assert_eq!(report.coupling.support(), vec![vec![0, 0, 0], vec![1, 1, 1]]);
    for e in report.coupling.entries() {
        assert_abs_diff_eq!(e.mass, 0.5, epsilon = 1e-12);
    }
    assert_abs_diff_eq!(report.primal, 0.0, epsilon = 1e-12);
}

#[test]
fn potentials_are_anchored_and_certify() {
    let space = Space::cube(2, 0.0, 1.0).unwrap();
    let system = MarginalSystem::new(
        (0..3).map(|s| random_generic_measure(&space, 5, 40 + s).unwrap()).collect(),
    )
    .unwrap();
    let tensor = build_cost_tensor(&system, &CostFunction::gangbo_swiech(3, 2).unwrap()).unwrap();
    let report = solve_exact_lp(&tensor, &system).unwrap();
    for u in &report.potentials.u[1..] {
        assert_eq!(u[0], 0.0);
    }
    assert!(report.gap_ok(), "gap {}", report.gap);
    assert!(report.dual_violation <= 1e-9);
    let support = report.coupling.support();
    assert!(report.potentials.equality_residual(&tensor, &support) <= 1e-7);
    assert!(report.coupling.len() <= report.vertex_bound);
    assert_eq!(report.vertex_bound, 5 * 3 - 3 + 1);
}

#[test]
fn normalization_moves_shifts_into_first() {
    let u = SplittingPotentials::new(vec![vec![1.0, 2.0], vec![3.0, 5.0], vec![-1.0, 0.0]]).normalized();
    assert_eq!(u.u, vec![vec![3.0, 4.0], vec![0.0, 2.0], vec![0.0, 1.0]]);
}

#[test]
fn reverse_order_reaches_same_optimum() {
    let space = Space::interval(0.0, 1.0).unwrap();
    let system = MarginalSystem::new((0..3).map(|s| random_generic_measure(&space, 6, s).unwrap()).collect()).unwrap();
    let tensor = build_cost_tensor(&system, &CostFunction::gangbo_swiech(3, 1).unwrap()).unwrap();
    let fwd = solve_exact_lp(&tensor, &system).unwrap();
    let rev = solve_exact_lp_with(&tensor, &system, LpOptions { order: PivotOrder::Reverse, ..LpOptions::default() }).unwrap();
    assert_abs_diff_eq!(fwd.primal, rev.primal, epsilon = 1e-12);
}

#[test]
fn solves_are_deterministic() {
    let space = Space::interval(0.0, 1.0).unwrap();
    let system = MarginalSystem::new((0..2).map(|s| random_generic_measure(&space, 7, s).unwrap()).collect()).unwrap();
    let tensor = build_cost_tensor(&system, &CostFunction::gangbo_swiech(2, 1).unwrap()).unwrap();
    let a = solve_exact_lp(&tensor, &system).unwrap();
    let b = solve_exact_lp(&tensor, &system).unwrap();
    assert_eq!(a.coupling, b.coupling);
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn entropic_small_epsilon_tracks_lp() {
    let system = binary_system(2);
    let tensor = tensor_from(&system, |a| (a[0] as f64 - a[1] as f64).powi(2));
    let lp = solve_exact_lp(&tensor, &system).unwrap();
    let (_, report) = solve_entropic(&tensor, &system, 1e-3, 10_000, 1e-10).unwrap();
    assert!(report.converged);
    assert!((report.objective - lp.primal).abs() < 1e-2);
}

#[test]
fn entropic_large_epsilon_is_nearly_product() {
    let space = Space::interval(0.0, 1.0).unwrap();
    let system = MarginalSystem::new((0..3).map(|s| random_generic_measure(&space, 4, s).unwrap()).collect()).unwrap();
    let tensor = build_cost_tensor(&system, &CostFunction::gangbo_swiech(3, 1).unwrap()).unwrap();
    let (plan, report) = solve_entropic(&tensor, &system, 1e3, 1000, 1e-12).unwrap();
    assert!(report.converged);
    assert!(plan.max_deviation(&DensePlan::product(&system)) < 1e-3);
}

#[test]
fn entropic_reports_nonconvergence() {
    let space = Space::interval(0.0, 1.0).unwrap();
    let system = MarginalSystem::new((0..3).map(|s| random_generic_measure(&space, 4, s).unwrap()).collect()).unwrap();
    let tensor = build_cost_tensor(&system, &CostFunction::gangbo_swiech(3, 1).unwrap()).unwrap();
    let (_, report) = solve_entropic(&tensor, &system, 0.05, 1, 1e-12).unwrap();
    assert!(!report.converged);
    assert_eq!(report.iterations, 1);
    assert!(matches!(solve_entropic(&tensor, &system, 0.0, 1, 1e-3), Err(SolverError::Epsilon(_))));
}

#[test]
fn entropic_gap_shrinks_with_epsilon() {
    let space = Space::interval(0.0, 1.0).unwrap();
    let system = MarginalSystem::new((0..3).map(|s| random_generic_measure(&space, 4, 10 + s).unwrap()).collect()).unwrap();
    let tensor = build_cost_tensor(&system, &CostFunction::gangbo_swiech(3, 1).unwrap()).unwrap();
    let lp = solve_exact_lp(&tensor, &system).unwrap().primal;
    let gaps: Vec<f64> = [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&eps| {
            let (_, r) = solve_entropic(&tensor, &system, eps, 50_000, 1e-11).unwrap();
            assert!(r.converged, "eps {eps}: {r:?}");
            (r.objective - lp).abs()
        })
        .collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
}

#[test]
fn probe_zero_cost_is_non_unique() {
    let system = binary_system(2);
    let tensor = tensor_from(&system, |_| 0.0);
    let report = uniqueness_probe(&tensor, &system, 8, DEFAULT_PROBE_MAGNITUDE, 1).unwrap();
    assert_eq!(report.verdict, ProbeVerdict::NonUnique);
    assert_eq!(report.witnesses.len(), 2);
    assert_ne!(report.witnesses[0].support(), report.witnesses[1].support());
}

#[test]
fn probe_generic_quadratic_is_unique() {
    let space = Space::interval(0.0, 1.0).unwrap();
    for (n, seed) in [(2usize, 3u64), (3, 4), (4, 5)] {
        let system = MarginalSystem::new(
            (0..2).map(|s| random_uniform_measure(&space, n, seed * 10 + s).unwrap()).collect(),
        )
        .unwrap();
        let tensor = build_cost_tensor(&system, &CostFunction::gangbo_swiech(2, 1).unwrap()).unwrap();
        // the brute-force minimum must be attained by a single permutation
        let perms = permutations(n);
        let values: Vec<f64> = perms
            .iter()
            .map(|p| (0..n).map(|k| tensor.get(&[k, p[k]])).sum::<f64>() / n as f64)
            .collect();
        let best = values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(values.iter().filter(|&&v| v <= best + 1e-9).count(), 1);
        let report = uniqueness_probe(&tensor, &system, 8, DEFAULT_PROBE_MAGNITUDE, seed).unwrap();
        assert_eq!(report.verdict, ProbeVerdict::Unique, "n = {n}");
    }
}

#[test]
fn probe_needs_two_trials() {
    let system = binary_system(2);
    let tensor = tensor_from(&system, |_| 0.0);
    assert!(matches!(uniqueness_probe(&tensor, &system, 1, 1e-9, 0), Err(SolverError::Trials(1))));
}

#[test]
fn coupling_validation() {
    let system = Arc::new(binary_system(2));
    assert!(Coupling::new(system.clone(), vec![(vec![0, 0], 0.5), (vec![1, 1], 0.5)]).is_ok());
    assert!(matches!(
        Coupling::new(system.clone(), vec![(vec![0, 0], 0.5), (vec![1, 0], 0.5)]),
        Err(SolverError::Marginal { marginal: 1, .. })
    ));
    assert!(Coupling::new(system.clone(), vec![(vec![0, 0], 0.5), (vec![0, 0], 0.5)]).is_err());
    assert!(Coupling::new(system.clone(), vec![(vec![0, 2], 1.0)]).is_err());
    assert!(Coupling::new(system, vec![(vec![0, 0], 1.0), (vec![1, 1], 0.0)]).is_err());
}

#[test]
fn csv_and_json_exports() {
    let system = binary_system(2);
    let tensor = tensor_from(&system, |a| (a[0] as f64 - a[1] as f64).powi(2));
    let report = solve_exact_lp(&tensor, &system).unwrap();
    let mut buf = Vec::new();
    report.coupling.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "i_1,i_2,mass");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,0,"));
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    for key in ["primal", "dual", "gap", "coupling", "potentials", "degeneracy", "iterations"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["potentials"]["anchor"]["absorbed_by"], 0);
}

#[test]
fn tensor_file_roundtrip() {
    let system = binary_system(3);
    let tensor = build_cost_tensor(&system, &CostFunction::gangbo_swiech(3, 1).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    tensor.write_file(&path).unwrap();
    assert_eq!(CostTensor::from_file(&path).unwrap(), tensor);
}

fn uniform_system(m: usize, n: usize, seed: u64) -> MarginalSystem {
    let space = Space::interval(0.0, 1.0).unwrap();
    MarginalSystem::new((0..m).map(|i| random_uniform_measure(&space, n, seed * 31 + i as u64).unwrap()).collect()).unwrap()
}

fn random_tensor(system: &MarginalSystem, values: &[f64]) -> CostTensor {
    let shape = system.shape();
    let size: usize = shape.iter().product();
    CostTensor::new(shape, values.iter().cycle().take(size).cloned().collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn two_marginal_lp_matches_permutation_oracle(
        n in 1usize..=4,
        seed in 0u64..1000,
        values in prop::collection::vec(-5.0f64..5.0, 16),
    ) {
        let system = uniform_system(2, n, seed);
        let tensor = random_tensor(&system, &values);
        let report = solve_exact_lp(&tensor, &system).unwrap();
        prop_assert!((report.primal - brute_force(&tensor, 2, n)).abs() <= 1e-9);
    }

    // Three-index assignment polytopes have fractional vertices, so for an
    // arbitrary tensor the permutation minimum is only an upper bound.
    #[test]
    fn three_marginal_lp_bounded_by_permutations(
        n in 1usize..=4,
        seed in 0u64..1000,
        values in prop::collection::vec(-5.0f64..5.0, 64),
    ) {
        let system = uniform_system(3, n, seed);
        let tensor = random_tensor(&system, &values);
        let report = solve_exact_lp(&tensor, &system).unwrap();
        prop_assert!(report.primal <= brute_force(&tensor, 3, n) + 1e-9);
    }

    #[test]
    fn three_marginal_structured_costs_match_permutations(
        n in 1usize..=4,
        seed in 0u64..1000,
        which in 0usize..3,
    ) {
        let system = uniform_system(3, n, seed);
        let cost = match which {
            0 => CostFunction::gangbo_swiech(3, 1).unwrap(),
            1 => CostFunction::heinich(3, 1, crate::costs::ScalarField::neg_quadratic(1.0)).unwrap(),
            _ => crate::costs::spec::pairwise_inner(3, 1, -1.0).unwrap(),
        };
        let tensor = build_cost_tensor(&system, &cost).unwrap();
        let report = solve_exact_lp(&tensor, &system).unwrap();
        prop_assert!((report.primal - brute_force(&tensor, 3, n)).abs() <= 1e-9);
    }

    #[test]
    fn solves_are_feasible_and_dual(
        shape in prop::collection::vec(1usize..=5, 2..=3),
        seed in 0u64..1000,
        values in prop::collection::vec(-3.0f64..3.0, 125),
    ) {
        let space = Space::interval(0.0, 1.0).unwrap();
        let system = MarginalSystem::new(
            shape.iter().enumerate().map(|(i, &n)| random_generic_measure(&space, n, seed + i as u64).unwrap()).collect(),
        ).unwrap();
        let tensor = random_tensor(&system, &values);
        let report = solve_exact_lp(&tensor, &system).unwrap();
        prop_assert!(report.coupling.marginal_residual() < 1e-9);
        prop_assert!(report.dual <= report.primal + 1e-9);
        prop_assert!(report.gap_ok(), "gap {}", report.gap);
        prop_assert!(report.dual_violation <= 1e-9);
        prop_assert!(report.coupling.len() <= report.vertex_bound);
        let support = report.coupling.support();
        prop_assert!(report.potentials.equality_residual(&tensor, &support) <= 1e-7);
    }
}
