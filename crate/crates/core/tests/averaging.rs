mod common;

use common::{grid_simplex_minimum, random_instance};
use mbsma::averaging::{
    ma_predict, ma_standard_errors, project_simplex, solve_weights, weighted_brier, PredictionMatrix,
    QuadraticObjective, WeightSolution,
};
use mbsma::SubjectId;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn vertex(k: usize, j: usize) -> Vec<f64> {
    (0..k).map(|i| if i == j { 1.0 } else { 0.0 }).collect()
}

fn manual(weights: Vec<f64>) -> WeightSolution {
    WeightSolution { weights, objective: 0.0, kkt_residual: 0.0, iterations: 0 }
}

#[test]
fn objective_matches_weighted_brier() {
    let (m, f) = random_instance(3, 4, 50);
    let obj = QuadraticObjective::new(&m, &f).unwrap();
    for w in [vec![0.25; 4], vec![0.1, 0.2, 0.3, 0.4], vertex(4, 2)] {
        let a = obj.value(&w);
        let b = weighted_brier(&m, &w, &f).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn dominant_model_gets_all_weight() {
    let (m, f) = random_instance(8, 3, 80);
    // Replace the first column by the observed outcome: a perfect model.
    let perfect: Vec<f64> = f.event.iter().map(|e| if *e { 1.0 } else { 0.0 }).collect();
    let cols = vec![perfect, m.column(1), m.column(2)];
    let vars = vec![vec![0.0; cols[0].len()]; 3];
    let m = PredictionMatrix::from_columns(0.0, 1.0, m.subjects.clone(), m.model_ids.clone(), &cols, &vars).unwrap();
    let sol = solve_weights(&m, &f).unwrap();
    assert!((sol.weights[0] - 1.0).abs() < 1e-8, "{:?}", sol.weights);
    assert!(sol.objective.abs() < 1e-12);
}

#[test]
fn identical_columns_share_weight() {
    let (m, f) = random_instance(9, 1, 40);
    let col = m.column(0);
    let cols = vec![col.clone(), col.clone(), col];
    let vars = vec![vec![0.0; cols[0].len()]; 3];
    let ids = vec!["a".to_string(), "b".to_string(), "c".to_string()];
    let m = PredictionMatrix::from_columns(0.0, 1.0, m.subjects.clone(), ids, &cols, &vars).unwrap();
    let sol = solve_weights(&m, &f).unwrap();
    for w in &sol.weights {
        assert!((w - 1.0 / 3.0).abs() < 1e-5, "{:?}", sol.weights);
    }
}

#[test]
fn projection_examples() {
    assert_eq!(project_simplex(&[0.2, 0.8]), vec![0.2, 0.8]);
    assert_eq!(project_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
    let p = project_simplex(&[0.0, 0.0, 0.0]);
    for v in p {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn standard_error_hand_example() {
    let subjects = vec![SubjectId(1), SubjectId(2)];
    let ids = vec!["a".to_string(), "b".to_string()];
    let cols = vec![vec![0.2, 0.5], vec![0.6, 0.5]];
    let vars = vec![vec![0.01, 0.04], vec![0.0, 0.09]];
    let m = PredictionMatrix::from_columns(0.0, 1.0, subjects, ids, &cols, &vars).unwrap();
    let out = ma_standard_errors(&m, &manual(vec![0.25, 0.75]));
    // Subject 1: point 0.5, Z = (−0.3, 0.1).
    assert!((out[0].point - 0.5).abs() < 1e-12);
    let buck = 0.25 * (0.09f64 + 0.01).sqrt() + 0.75 * 0.01f64.sqrt();
    let burn = (0.25 * 0.10 + 0.75 * 0.01f64).sqrt();
    assert!((out[0].se_buckland - buck).abs() < 1e-12);
    assert!((out[0].se_burnham - burn).abs() < 1e-12);
    // Subject 2: point 0.5, Z = 0.
    let buck = 0.25 * 0.2 + 0.75 * 0.3;
    let burn = (0.25 * 0.04 + 0.75 * 0.09f64).sqrt();
    assert!((out[1].se_buckland - buck).abs() < 1e-12);
    assert!((out[1].se_burnham - burn).abs() < 1e-12);
}

#[test]
fn equal_models_give_root_variance() {
    let subjects = vec![SubjectId(1), SubjectId(2), SubjectId(3)];
    let ids = vec!["a".to_string(), "b".to_string(), "c".to_string()];
    let p = vec![0.1, 0.37, 0.9];
    let v = vec![0.003, 0.0123, 0.5];
    let m = PredictionMatrix::from_columns(
        0.0,
        1.0,
        subjects,
        ids,
        &[p.clone(), p.clone(), p],
        &[v.clone(), v.clone(), v.clone()],
    )
    .unwrap();
    for out in
        [ma_standard_errors(&m, &manual(vec![0.25, 0.25, 0.5])), ma_standard_errors(&m, &manual(vec![0.0, 1.0, 0.0]))]
    {
        for (o, vi) in out.iter().zip(&v) {
            assert_eq!(o.se_buckland, vi.sqrt());
            assert_eq!(o.se_burnham, vi.sqrt());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn solver_is_feasible_optimal_and_dominant(seed in any::<u64>(), k in 2usize..=10, n in 20usize..=200) {
        let (m, f) = random_instance(seed, k, n);
        let sol = solve_weights(&m, &f).unwrap();
        prop_assert!(sol.weights.iter().all(|w| *w >= -1e-8));
        prop_assert!((sol.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
        let obj = QuadraticObjective::new(&m, &f).unwrap();
        prop_assert!(obj.kkt_residual(&sol.weights) <= 1e-7, "kkt {}", obj.kkt_residual(&sol.weights));
        let best = (0..k).map(|j| weighted_brier(&m, &vertex(k, j), &f).unwrap()).fold(f64::INFINITY, f64::min);
        prop_assert!(sol.objective <= best + 1e-10);
        if k <= 3 {
            prop_assert!(sol.objective <= grid_simplex_minimum(&obj, 1000) + 1e-6);
        }
    }

    #[test]
    fn quadratic_form_is_positive_semidefinite(seed in any::<u64>(), k in 2usize..=10, n in 20usize..=200) {
        let (m, f) = random_instance(seed, k, n);
        let obj = QuadraticObjective::new(&m, &f).unwrap();
        let q = DMatrix::from_row_slice(k, k, &obj.q);
        let min = q.symmetric_eigenvalues().min();
        prop_assert!(min >= -1e-10, "min eigenvalue {min}");
    }

    #[test]
    fn averaged_predictions_and_errors_are_consistent(seed in any::<u64>(), k in 2usize..=6, n in 20usize..=100) {
        let (m, f) = random_instance(seed, k, n);
        let sol = solve_weights(&m, &f).unwrap();
        let pred = ma_predict(&m, &sol);
        for (i, p) in pred.iter().enumerate() {
            let row = m.row(i);
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*p >= lo - 1e-12 && *p <= hi + 1e-12);
        }
        for o in ma_standard_errors(&m, &sol) {
            prop_assert!(o.se_burnham >= o.se_buckland - 1e-15);
        }
    }

    #[test]
    fn projection_lands_on_simplex(v in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let p = project_simplex(&v);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        // Idempotent.
        let again = project_simplex(&p);
        for (a, b) in p.iter().zip(&again) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
