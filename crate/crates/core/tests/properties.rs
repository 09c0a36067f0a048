use proptest::prelude::*;

use geoward::damage::{node_deletion_plan, DamagePlan};
use geoward::dataset::synth_gaussians;
use geoward::geodesic::{solve_qp, MetricSystem};
use geoward::linalg::{dot, SymMatrix};
use geoward::metric::{assemble_metric, quadratic_form_matfree};
use geoward::network::{apply_mask, Activation, OutputMode};
use geoward::paths::{path_integral, PathMeasure};
use geoward::{FlatWeights, NetworkSpec};

fn small_net() -> NetworkSpec {
    NetworkSpec::new(vec![3, 5, 3], Activation::Tanh, OutputMode::Softmax).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mask_zeroes_exactly_the_plan(indices in proptest::collection::vec(0usize..38, 0..20), seed in 0u64..1000) {
        let spec = small_net();
        let w = FlatWeights::init(&spec, seed);
        let plan = DamagePlan::new(indices, "prop").unwrap();
        let masked = apply_mask(&w, &plan).unwrap();
        for i in 0..w.len() {
            if plan.contains(i) {
                prop_assert_eq!(masked[i], 0.0);
            } else {
                prop_assert_eq!(masked[i], w[i]);
            }
        }
        prop_assert_eq!(apply_mask(&masked, &plan).unwrap(), masked);
    }

    #[test]
    fn metric_form_is_nonnegative_and_matches_matrix_free(seed in 0u64..1000, scale in 0.1f64..3.0) {
        let spec = small_net();
        let w = FlatWeights::init(&spec, seed);
        let batch = synth_gaussians(3, 3, 4, 2.0, seed).unwrap();
        let g = assemble_metric(&spec, &w, &batch).unwrap();
        let du: Vec<f64> = (0..spec.n_weights()).map(|i| scale * ((i as f64 + seed as f64) * 0.7).sin()).collect();
        let dense = g.quadratic_form(&du).unwrap();
        let free = quadratic_form_matfree(&spec, &w, &batch, &du).unwrap();
        prop_assert!(dense >= 0.0);
        prop_assert!((dense - free).abs() <= 1e-12 * dense.max(1e-12));
    }

    #[test]
    fn qp_step_is_feasible_and_no_worse_than_standing_still(
        diag in proptest::collection::vec(0.0f64..5.0, 6),
        v in proptest::collection::vec(-1.0f64..1.0, 6),
        beta in 0.01f64..10.0,
        cap in 1e-4f64..1.0,
    ) {
        prop_assume!(dot(&v, &v) > 1e-6);
        let g = SymMatrix::from_diagonal(&diag).unwrap();
        let s = solve_qp(&MetricSystem::from_matrix(g.clone()).unwrap(), &v, beta, cap).unwrap();
        prop_assert!(s.norm_sq <= cap);
        prop_assert!(s.mu >= 0.0);
        prop_assert!(s.kkt_residual <= 1e-8);
        let objective = g.quadratic(&s.theta) - beta * dot(&s.theta, &v);
        prop_assert!(objective <= 0.0);
    }

    #[test]
    fn energy_is_additive_over_subpaths(seed in 0u64..200, split in 1usize..5) {
        let spec = small_net();
        let w = FlatWeights::init(&spec, seed);
        let batch = synth_gaussians(3, 3, 3, 2.0, seed).unwrap();
        let points: Vec<FlatWeights> = (0..6)
            .map(|k| FlatWeights::new(w.as_slice().iter().enumerate().map(|(i, x)| x * (1.0 - 0.1 * k as f64) + 0.01 * (i * k) as f64).collect()))
            .collect();
        let times = [0.0, 0.1, 0.25, 0.5, 0.8, 1.0];
        let whole = path_integral(&spec, &batch, &points, &times, PathMeasure::Energy).unwrap();
        let left = path_integral(&spec, &batch, &points[..=split], &times[..=split], PathMeasure::Energy).unwrap();
        let right = path_integral(&spec, &batch, &points[split..], &times[split..], PathMeasure::Energy).unwrap();
        prop_assert!((whole - left - right).abs() <= 1e-12 * whole.max(1e-300));
    }
}

#[test]
fn node_deletion_covers_fan_in_bias_and_fan_out() {
    let spec = small_net();
    let plan = node_deletion_plan(&spec, 1, &[2]).unwrap();
    // 3 incoming weights, 1 bias, 3 outgoing weights
    assert_eq!(plan.len(), 7);
    assert!(plan.contains(spec.weight_index(0, 2, 0)));
    assert!(plan.contains(spec.bias_index(0, 2)));
    assert!(plan.contains(spec.weight_index(1, 0, 2)));
}
