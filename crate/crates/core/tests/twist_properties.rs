use mmot_core::costs::spec::{gangbo_swiech_cubic, pairwise_inner};
use mmot_core::costs::{CostFunction, ScalarField};
use mmot_core::measures::{nested_quantile_system, Space};
use mmot_core::solver::{build_cost_tensor, solve_exact_lp};
use mmot_core::twistcheck::*;
use proptest::prelude::*;

fn unit() -> Space {
    Space::interval(0.0, 1.0).unwrap()
}

fn reference_costs() -> Vec<CostFunction> {
    vec![
        CostFunction::gangbo_swiech(3, 1).unwrap(),
        CostFunction::heinich(3, 1, ScalarField::neg_quadratic(1.0)).unwrap(),
    ]
}

fn passes_sufficient_conditions(cost: &CostFunction, seed: u64) -> bool {
    let spaces = vec![unit(); 3];
    let samples = sample_tuples(&spaces, 10, seed);
    let nondeg = nondegeneracy_check(cost, &samples, DET_THRESHOLD, HessianMode::Auto).unwrap();
    let grid: Vec<Vec<f64>> = (0..50).map(|k| vec![k as f64 / 49.0]).collect();
    let twisted = samples
        .iter()
        .all(|x| one_m_twist_check(cost, &x[..2], &grid, GRAD_TOL, POINT_TOL).unwrap().injective);
    let scan = tensor_t_scan(cost, &spaces, 10, 2, seed, HessianMode::Auto, EIGEN_MARGIN).unwrap();
    nondeg.passed && twisted && scan.negative_on_samples
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn optimal_supports_of_twisted_costs_are_collision_free_graphs(
        seed in 0u64..10_000,
        n1 in 3usize..8,
        n2 in 2usize..8,
        n3 in 2usize..8,
    ) {
        for cost in reference_costs() {
            prop_assume!(passes_sufficient_conditions(&cost, seed));
            let system = nested_quantile_system(&unit(), &[n1, n2.min(n1), n3.min(n1)], seed).unwrap();
            let tensor = build_cost_tensor(&system, &cost).unwrap();
            let report = solve_exact_lp(&tensor, &system).unwrap();
            let twist = check_twist_on_support(&cost, &report.coupling, GRAD_TOL, POINT_TOL).unwrap();
            prop_assert!(twist.collisions.is_empty());
            prop_assert!(graph_check(&report.coupling).is_graph);
        }
    }

    #[test]
    fn tensors_are_symmetric_and_add_up(
        ybar in prop::collection::vec(-1.0f64..1.0, 4),
        anchors in prop::collection::vec(-1.0f64..1.0, 8),
        eps in -1.0f64..1.0,
    ) {
        let pt = |v: &[f64]| v.iter().map(|&a| vec![a]).collect::<Vec<_>>();
        let y = pt(&ybar);
        let mut a1 = pt(&anchors[..4]);
        let mut a2 = pt(&anchors[4..]);
        a1[1] = y[1].clone();
        a2[2] = y[2].clone();
        let costs = [
            CostFunction::gangbo_swiech(4, 1).unwrap(),
            CostFunction::heinich(4, 1, ScalarField::neg_cosh()).unwrap(),
            gangbo_swiech_cubic(4, eps).unwrap(),
            pairwise_inner(4, 1, -1.0).unwrap(),
        ];
        for cost in &costs {
            let r = tensor_report(cost, &y, &[a1.clone(), a2.clone()], HessianMode::Analytic, EIGEN_MARGIN).unwrap();
            prop_assert!(r.asymmetry.s < 1e-6 && r.asymmetry.h < 1e-6);
            prop_assert!(r.symmetric);
            for i in 0..2 {
                for j in 0..2 {
                    prop_assert_eq!(r.t[i][j], r.s[i][j] + r.h[i][j]);
                    prop_assert_eq!(r.t[i][j], r.t[j][i]);
                }
            }
            let mut neg: Vec<f64> = r.eigenvalues_t.iter().map(|v| -v).collect();
            neg.reverse();
            prop_assert_eq!(neg, r.eigenvalues_neg_t.clone());
        }
    }

    #[test]
    fn finite_difference_hessians_track_analytic(
        x in prop::collection::vec(-2.0f64..2.0, 3),
        i in 0usize..3,
        j in 0usize..3,
    ) {
        let p: Vec<Vec<f64>> = x.iter().map(|&a| vec![a]).collect();
        for cost in reference_costs() {
            let a = mixed_hessian(&cost, &p, i, j, HessianMode::Analytic).unwrap()[(0, 0)];
            let f = mixed_hessian(&cost, &p, i, j, HessianMode::FiniteDifference).unwrap()[(0, 0)];
            prop_assert!((a - f).abs() <= 1e-5 * (1.0 + a.abs()));
        }
    }
}
