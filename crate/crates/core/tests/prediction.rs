mod common;

use common::{grid_risk, intercept_spec, one_marker_config, simulate, slope_spec, toy_parameters};
use mbsma::joint_model::FittedJointModel;
use mbsma::prediction::{predict_risk, PredictOptions, PredictionQuery, Predictor};
use mbsma::{Dataset, ModelError};
use proptest::prelude::*;

const KNOTS: [f64; 3] = [0.6, 1.2, 2.0];

fn setup(intercept_only: bool) -> (Dataset, FittedJointModel) {
    let d = simulate(&one_marker_config(60, 21)).dataset;
    let spec = if intercept_only { intercept_spec(1, KNOTS.to_vec()) } else { slope_spec(1, KNOTS.to_vec()) };
    let model = spec.resolve(&d).unwrap();
    let params = toy_parameters(&model);
    (d, FittedJointModel::from_parameters(model, params, None).unwrap())
}

#[test]
fn agrees_with_grid_integration() {
    let (d, fitted) = setup(true);
    let s = 0.6;
    let opts = PredictOptions { mc_draws: 2000, seed: 4, ..PredictOptions::default() };
    let predictor = Predictor::new(&fitted, &opts).unwrap();
    for id in d.at_risk(s).into_iter().take(6) {
        let h = d.truncate_history(id, s).unwrap();
        let p = predictor.predict(&h, 0.8).unwrap();
        let oracle = grid_risk(&fitted.model, &fitted.estimate, &h, 0.8);
        assert!((p.point - oracle).abs() <= 3.0 * p.mc_se, "subject {id}: {} vs {oracle} (se {})", p.point, p.mc_se);
        assert!(p.acceptance_rate > 0.1 && p.acceptance_rate < 0.9, "acceptance {}", p.acceptance_rate);
    }
}

#[test]
fn deterministic_given_seed() {
    let (d, fitted) = setup(false);
    let id = d.at_risk(0.4)[0];
    let h = d.truncate_history(id, 0.4).unwrap();
    let q = PredictionQuery { landmark: 0.4, window: 0.5, mc_draws: 100, seed: 8 };
    let a = predict_risk(&fitted, &h, &q).unwrap();
    let b = predict_risk(&fitted, &h, &q).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.point.to_bits(), b.point.to_bits());
    let other = predict_risk(&fitted, &h, &PredictionQuery { seed: 9, ..q }).unwrap();
    assert_ne!(a.point, other.point);
}

#[test]
fn landmark_mismatch_and_unconverged_fit_are_rejected() {
    let (d, mut fitted) = setup(false);
    let id = d.at_risk(0.4)[0];
    let h = d.truncate_history(id, 0.4).unwrap();
    let q = PredictionQuery { landmark: 0.5, window: 0.5, mc_draws: 10, seed: 0 };
    assert!(matches!(predict_risk(&fitted, &h, &q), Err(ModelError::InvalidSpec(_))));
    fitted.converged = false;
    let q = PredictionQuery { landmark: 0.4, ..q };
    assert!(matches!(predict_risk(&fitted, &h, &q), Err(ModelError::NotConverged)));
    let lenient = PredictOptions { require_converged: false, ..PredictOptions::default() };
    assert!(Predictor::new(&fitted, &lenient).is_ok());
}

#[test]
fn mc_error_shrinks_as_root_m() {
    let (d, fitted) = setup(true);
    let id = d.at_risk(0.4)[2];
    let h = d.truncate_history(id, 0.4).unwrap();
    let ms = [250usize, 1000, 4000, 16000];
    let pts: Vec<(f64, f64)> = ms
        .iter()
        .map(|&m| {
            let opts = PredictOptions { mc_draws: m, mh_steps: 50, seed: 1, ..PredictOptions::default() };
            let p = Predictor::new(&fitted, &opts).unwrap().predict(&h, 1.0).unwrap();
            ((m as f64).ln(), p.mc_se.ln())
        })
        .collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / 4.0;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / 4.0;
    let slope =
        pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((slope + 0.5).abs() <= 0.1, "slope {slope}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn bounded_and_monotone_in_window(seed in any::<u64>(), s in 0.0f64..1.2, w in prop::collection::vec(0.0f64..3.0, 1..6)) {
        let (d, fitted) = setup(false);
        let ids = d.at_risk(s);
        prop_assume!(!ids.is_empty());
        let h = d.truncate_history(ids[seed as usize % ids.len()], s).unwrap();
        let mut windows = w;
        windows.sort_by(f64::total_cmp);
        let opts = PredictOptions { mc_draws: 40, mh_steps: 30, seed, ..PredictOptions::default() };
        let predictor = Predictor::new(&fitted, &opts).unwrap();
        let preds = predictor.predict_windows(&h, &windows).unwrap();
        for p in &preds {
            prop_assert!((0.0..=1.0).contains(&p.point));
        }
        for pair in preds.windows(2) {
            prop_assert!(pair[0].point <= pair[1].point);
        }
        for (p, &t) in preds.iter().zip(&windows) {
            prop_assert_eq!(p.point, predictor.predict(&h, t).unwrap().point);
        }
    }
}
