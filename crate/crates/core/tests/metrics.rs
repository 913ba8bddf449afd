mod common;

use common::survival_dataset;
use mbsma::metrics::{auc, brier, brier_two_sum, censoring_km, ipcw_frame, mse, RiskSetFrame};
use mbsma::MetricError;
use proptest::prelude::*;

#[test]
fn km_hand_example() {
    let g = censoring_km(&survival_dataset(&[(1.0, false), (2.0, true), (3.0, false)]));
    assert_eq!(g.eval(0.0), 1.0);
    assert_eq!(g.eval(0.999), 1.0);
    assert!((g.eval(1.0) - 2.0 / 3.0).abs() < 1e-15);
    assert!((g.eval(2.5) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(g.eval(3.0), 0.0);
    assert_eq!(g.eval_left(1.0), 1.0);
}

#[test]
fn km_all_censored_at_one_time() {
    let g = censoring_km(&survival_dataset(&[(2.0, false), (2.0, false), (2.0, false)]));
    assert_eq!(g.eval(1.999), 1.0);
    assert_eq!(g.eval(2.0), 0.0);
}

#[test]
fn km_without_censoring() {
    let g = censoring_km(&survival_dataset(&[(1.0, true), (2.0, true)]));
    assert!(g.jump_times.is_empty());
    assert_eq!(g.eval(10.0), 1.0);
}

#[test]
fn five_subject_weights() {
    // Censoring KM: 4/5 after 0.5, 4/5 * 2/3 after 1.5.
    let d = survival_dataset(&[(0.5, false), (1.0, true), (1.5, false), (2.5, true), (3.0, false)]);
    let f = ipcw_frame(&d, 0.0, 2.0).unwrap();
    let expected = [0.0, 5.0 / 4.0, 0.0, 15.0 / 8.0, 15.0 / 8.0];
    for (w, e) in f.weight.iter().zip(expected) {
        assert!((w - e).abs() < 1e-12, "{w} vs {e}");
    }
    assert_eq!(f.event, vec![false, true, false, false, false]);
}

#[test]
fn censored_inside_window_gets_zero_weight() {
    let d = survival_dataset(&[(1.25, false), (3.0, true), (4.0, false)]);
    let f = ipcw_frame(&d, 1.0, 0.5).unwrap();
    assert_eq!(f.weight[0], 0.0);
}

#[test]
fn censoring_at_window_end_counts_as_survival() {
    // Everyone still at risk is censored at the study end, which is s+t.
    let d = survival_dataset(&[(0.5, true), (1.0, false), (1.0, false), (0.8, false)]);
    let f = ipcw_frame(&d, 0.0, 1.0).unwrap();
    // One censoring among three at risk at 0.8: Ĝ(1−) = 2/3.
    assert!((f.survivor_g - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(f.event, vec![true, false, false, false]);
    assert!(f.is_survivor(1) && f.is_survivor(2) && !f.is_survivor(3));
    for (w, e) in f.weight.iter().zip([1.0, 1.5, 1.5, 0.0]) {
        assert!((w - e).abs() < 1e-12, "{w} vs {e}");
    }
}

#[test]
fn exhausted_censoring_support() {
    let d = survival_dataset(&[(1.0, true), (2.0, false)]);
    assert!(matches!(ipcw_frame(&d, 0.5, 2.0), Err(MetricError::CensoringExhausted(_))));
    assert!(matches!(ipcw_frame(&d, 5.0, 1.0), Err(MetricError::EmptyRiskSet(_))));
}

#[test]
fn three_subject_brier() {
    // s = 0, t = 1: event at 0.5, censored at 0.7, survivor to 2.
    // Ĝ(1) = 1/2, so weights are 1, 0, 2.
    let d = survival_dataset(&[(0.5, true), (0.7, false), (2.0, false)]);
    let f = ipcw_frame(&d, 0.0, 1.0).unwrap();
    let p = [0.6, 0.3, 0.2];
    let hand = (1.0 * 0.4 * 0.4 + 2.0 * 0.2 * 0.2) / 3.0;
    assert!((brier(&p, &f).unwrap() - hand).abs() < 1e-12);
    assert!((brier_two_sum(&p, &f).unwrap() - hand).abs() < 1e-12);
}

#[test]
fn trivial_auc_and_brier() {
    let d = survival_dataset(&[(0.5, true), (2.0, true)]);
    let f = ipcw_frame(&d, 0.0, 1.0).unwrap();
    assert_eq!(auc(&[0.9, 0.1], &f).unwrap(), Some(1.0));
    assert_eq!(auc(&[0.4, 0.4], &f).unwrap(), Some(0.5));
    assert_eq!(brier(&[1.0, 0.0], &f).unwrap(), 0.0);
    assert_eq!(brier(&[0.5, 0.5], &f).unwrap(), 0.25);
    let only_cases = survival_dataset(&[(0.5, true), (0.6, true)]);
    let f = ipcw_frame(&only_cases, 0.0, 1.0).unwrap();
    assert_eq!(auc(&[0.2, 0.3], &f).unwrap(), None);
}

/// Direct double sum over (case, control) pairs.
fn brute_auc(p: &[f64], f: &RiskSetFrame) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..p.len() {
        if !f.event[i] {
            continue;
        }
        for j in 0..p.len() {
            if !f.is_survivor(j) {
                continue;
            }
            let w = f.weight[i] * f.weight[j];
            let c = if p[i] > p[j] {
                1.0
            } else if p[i] == p[j] {
                0.5
            } else {
                0.0
            };
            num += w * c;
            den += w;
        }
    }
    (den > 0.0).then(|| num / den)
}

#[test]
fn six_subject_auc_with_censored_case() {
    let d = survival_dataset(&[(0.3, true), (0.4, false), (0.8, true), (1.5, false), (2.0, true), (2.5, false)]);
    let f = ipcw_frame(&d, 0.0, 1.0).unwrap();
    let p = [0.7, 0.9, 0.3, 0.5, 0.3, 0.1];
    let a = auc(&p, &f).unwrap().unwrap();
    let b = brute_auc(&p, &f).unwrap();
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn mse_examples() {
    assert_eq!(mse(&[0.1, 0.2], &[0.1, 0.2]).unwrap(), 0.0);
    assert!((mse(&[0.3, 0.5], &[0.2, 0.4]).unwrap() - 0.01).abs() < 1e-15);
    assert!(mse(&[0.3], &[0.2, 0.4]).is_err());
}

fn arb_data(censoring: bool) -> impl Strategy<Value = (Vec<(f64, bool)>, Vec<f64>)> {
    (5usize..60).prop_flat_map(move |n| {
        (
            prop::collection::vec((1u32..400, prop::bool::weighted(if censoring { 0.6 } else { 1.0 })), n),
            prop::collection::vec(0u32..=1000, n),
        )
            .prop_map(|(rows, p)| {
                (
                    rows.into_iter().map(|(t, e)| (f64::from(t) / 100.0, e)).collect(),
                    p.into_iter().map(|v| f64::from(v) / 1000.0).collect(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn no_censoring_reduces_to_plain_statistics((rows, p) in arb_data(false), s in 0.0f64..1.0, t in 0.2f64..2.0) {
        let d = survival_dataset(&rows);
        let Ok(f) = ipcw_frame(&d, s, t) else { return Ok(()); };
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].0 > s).collect();
        let pred: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let plain = pred.iter().zip(&f.event).map(|(q, e)| {
            let d = if *e { 1.0 } else { 0.0 };
            (d - q) * (d - q)
        }).sum::<f64>() / pred.len() as f64;
        prop_assert_eq!(brier(&pred, &f).unwrap(), plain);
        let cases: Vec<f64> = (0..pred.len()).filter(|&i| f.event[i]).map(|i| pred[i]).collect();
        let controls: Vec<f64> = (0..pred.len()).filter(|&i| !f.event[i]).map(|i| pred[i]).collect();
        let mw = if cases.is_empty() || controls.is_empty() {
            None
        } else {
            let mut u = 0.0;
            for a in &cases {
                for b in &controls {
                    u += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
            Some(u / (cases.len() * controls.len()) as f64)
        };
        prop_assert_eq!(auc(&pred, &f).unwrap(), mw);
    }

    #[test]
    fn auc_invariant_under_increasing_transform((rows, p) in arb_data(true), s in 0.0f64..1.0, t in 0.2f64..2.0) {
        let d = survival_dataset(&rows);
        let Ok(f) = ipcw_frame(&d, s, t) else { return Ok(()); };
        let pred: Vec<f64> = (0..rows.len()).filter(|&i| rows[i].0 > s).map(|i| p[i]).collect();
        let tr: Vec<f64> = pred.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
        match (auc(&pred, &f).unwrap(), auc(&tr, &f).unwrap()) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn constant_brier_minimized_at_weighted_event_fraction((rows, _p) in arb_data(true), s in 0.0f64..1.0, t in 0.2f64..2.0) {
        let d = survival_dataset(&rows);
        let Ok(f) = ipcw_frame(&d, s, t) else { return Ok(()); };
        let wsum: f64 = f.weight.iter().sum();
        prop_assume!(wsum > 0.0);
        let star = f.weight.iter().zip(&f.event).filter(|(_, e)| **e).map(|(w, _)| w).sum::<f64>() / wsum;
        let n = f.n_at_risk();
        let best = brier(&vec![star; n], &f).unwrap();
        for k in 0..=1000 {
            let q = f64::from(k) / 1000.0;
            prop_assert!(best <= brier(&vec![q; n], &f).unwrap() + 1e-14);
        }
    }

    #[test]
    fn brier_forms_agree((rows, p) in arb_data(true), s in 0.0f64..1.0, t in 0.2f64..2.0) {
        let d = survival_dataset(&rows);
        let Ok(f) = ipcw_frame(&d, s, t) else { return Ok(()); };
        let pred: Vec<f64> = (0..rows.len()).filter(|&i| rows[i].0 > s).map(|i| p[i]).collect();
        let a = brier(&pred, &f).unwrap();
        let b = brier_two_sum(&pred, &f).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn frame_invariants((rows, _p) in arb_data(true), s in 0.0f64..1.0, t in 0.2f64..2.0) {
        let d = survival_dataset(&rows);
        let Ok(f) = ipcw_frame(&d, s, t) else { return Ok(()); };
        let g = censoring_km(&d);
        prop_assert!(g.values.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(g.values.iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..f.n_at_risk() {
            prop_assert!(f.weight[i] >= 0.0);
            let censored_inside = !f.event[i] && !f.is_survivor(i);
            prop_assert_eq!(censored_inside, f.weight[i] == 0.0);
        }
    }
}
