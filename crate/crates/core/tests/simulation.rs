mod common;

use common::{oracle_cumhaz, survival_z_scores, with_fixed_effects};
use mbsma::simulation::{
    generate_dataset, read_simulation, replicate_config, scenario, true_risk, tune_censoring_rate, write_simulation,
    CensoringConfig, ScenarioConfig, SimAssociation, SCENARIOS,
};
use mbsma::MarkerFamily;
use proptest::prelude::*;

const TIMES: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

#[test]
fn constant_association_survival_matches_analytic() {
    let c = scenario("I.1").unwrap();
    let b = [0.3, -0.2, -0.5, 0.4, 0.1, 0.6];
    for z in survival_z_scores(&c, &b, &TIMES) {
        assert!(z <= 3.0, "z = {z}");
    }
}

#[test]
fn time_varying_association_survival_matches_analytic() {
    let c = scenario("4").unwrap();
    let b = [-0.4, 0.3, 0.5, -0.2];
    for z in survival_z_scores(&c, &b, &TIMES) {
        assert!(z <= 3.0, "z = {z}");
    }
}

#[test]
fn true_risk_matches_oracle() {
    for name in ["I.1", "4"] {
        let c = scenario(name).unwrap();
        let b: Vec<f64> = (0..2 * c.n_markers()).map(|i| 0.1 * i as f64 - 0.25).collect();
        for (s, t) in [(0.0, 0.5), (0.5, 1.0), (1.5, 0.5)] {
            let oracle = 1.0 - (-(oracle_cumhaz(&c, &b, s + t) - oracle_cumhaz(&c, &b, s))).exp();
            let r = true_risk(&c, &b, s, t);
            assert!((r - oracle).abs() < 1e-9, "{name}: {r} vs {oracle}");
        }
    }
}

#[test]
fn registry_matches_scenario_definitions() {
    let alpha = |name: &str| match scenario(name).unwrap().association {
        SimAssociation::Constant { alpha } => alpha,
        other => panic!("{other:?}"),
    };
    assert_eq!(alpha("I.1"), vec![-0.5, -0.5, -0.5]);
    assert_eq!(alpha("I.2"), vec![0.0, -0.5, -0.5]);
    assert_eq!(alpha("I.3"), vec![0.0, -0.5, -1.0]);
    assert_eq!(alpha("D.2"), alpha("I.2"));
    assert_eq!(alpha("M.3"), alpha("I.3"));
    assert_eq!(alpha("S.1"), vec![-0.5, -0.5, -0.5, 0.0, 0.0, 0.0, 0.0]);

    let i1 = scenario("I.1").unwrap();
    assert_eq!(i1.re_covariance[0][..2], [1.0, 0.5]);
    assert_eq!(i1.re_covariance[0][2..], [0.0; 4]);
    let d1 = scenario("D.1").unwrap();
    assert_eq!(d1.re_covariance[0], vec![1.0, 0.5, 0.5, 0.5, 0.5, 0.5]);
    for m in &d1.markers {
        assert_eq!((m.beta, m.variance, m.family), ([0.0, -1.0], 0.5, MarkerFamily::Gaussian));
    }
    assert_eq!(scenario("M.1").unwrap().markers[2].family, MarkerFamily::Binary);
    let s1 = scenario("S.1").unwrap();
    assert_eq!(s1.n_markers(), 7);
    assert_eq!(s1.markers[0].family, MarkerFamily::Binary);

    let s4 = scenario("4").unwrap();
    assert_eq!(s4.association, SimAssociation::TimeVarying { intercept: vec![-0.8, 0.0], slope: vec![0.4, -0.4] });
    assert_eq!(s4.markers[0].beta, [0.13, -0.76]);
    assert_eq!(s4.markers[1].beta, [0.18, -0.62]);
    assert!((s4.markers[0].variance - 0.56f64.powi(2)).abs() < 1e-15);
    assert!((s4.markers[1].variance - 0.65f64.powi(2)).abs() < 1e-15);
    assert_eq!(s4.re_covariance[0][..2], [0.69, 0.01]);
    assert_eq!(s4.re_covariance[3][2..], [-0.01, 0.20]);
    assert_eq!(s4.re_covariance[0][2..], [0.0, 0.0]);
    assert!(scenario("Z.9").is_err());
}

#[test]
fn all_scenarios_generate() {
    for name in SCENARIOS {
        let c = ScenarioConfig { n_subjects: 40, seed: 1, ..scenario(name).unwrap() };
        let sim = generate_dataset(&c).unwrap();
        assert_eq!(sim.dataset.n_subjects(), 40, "{name}");
        assert_eq!(sim.dataset.markers().len(), c.n_markers());
    }
}

#[test]
fn censoring_respects_cutoff_and_target() {
    let c = ScenarioConfig { n_subjects: 4000, seed: 3, ..scenario("D.1").unwrap() };
    let sim = generate_dataset(&c).unwrap();
    let cutoff = c.censoring.cutoff;
    assert!(sim.dataset.subjects().iter().all(|r| r.observed_time <= cutoff));
    let early = sim.dataset.subjects().iter().filter(|r| !r.event && r.observed_time < cutoff).count() as f64 / 4000.0;
    assert!((early - c.censoring.target_fraction).abs() < 0.03, "censored before cutoff: {early}");
    assert!(sim.dataset.observations().iter().all(|o| {
        let r = &sim.dataset.subjects()[sim.dataset.subject_index(o.subject).unwrap()];
        o.time <= r.observed_time
    }));
}

#[test]
fn censoring_fraction_increases_with_rate() {
    let base = ScenarioConfig { n_subjects: 2000, seed: 5, ..scenario("I.1").unwrap() };
    let frac = |rate: f64| {
        let c = ScenarioConfig {
            censoring: CensoringConfig { rate: Some(rate), ..base.censoring.clone() },
            ..base.clone()
        };
        let sim = generate_dataset(&c).unwrap();
        sim.dataset.subjects().iter().filter(|r| !r.event && r.observed_time < c.censoring.cutoff).count()
    };
    let counts: Vec<usize> = [0.0, 0.05, 0.1, 0.2, 0.4].iter().map(|r| frac(*r)).collect();
    assert_eq!(counts[0], 0);
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    assert!(tune_censoring_rate(&base) > 0.0);
}

#[test]
fn binary_marker_probabilities() {
    // With β = (0, −1) and no random effects, P(y = 1) = expit(−v).
    let c = with_fixed_effects(&scenario("M.1").unwrap(), &[0.0; 6], 10_000, 9);
    let sim = generate_dataset(&c).unwrap();
    for v in [0.0, 1.0] {
        let vals: Vec<f64> =
            sim.dataset.observations().iter().filter(|o| o.marker == 2 && o.time == v).map(|o| o.value).collect();
        assert!(vals.iter().all(|x| *x == 0.0 || *x == 1.0));
        let p = 1.0 / (1.0 + f64::exp(v));
        let emp = vals.iter().sum::<f64>() / vals.len() as f64;
        let se = (p * (1.0 - p) / vals.len() as f64).sqrt();
        assert!((emp - p).abs() <= 3.0 * se, "visit {v}: {emp} vs {p}");
    }
}

#[test]
fn simulation_round_trips_through_disk() {
    let c = ScenarioConfig { n_subjects: 30, seed: 2, ..scenario("M.2").unwrap() };
    let sim = generate_dataset(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_simulation(&sim, dir.path()).unwrap();
    let back = read_simulation(dir.path()).unwrap();
    assert_eq!(back.dataset, sim.dataset);
    assert_eq!(back.effects, sim.effects);
    assert_eq!(back.config, sim.config);
}

#[test]
fn bootstrap_scenario_resamples_with_truth() {
    let c = ScenarioConfig { n_subjects: 50, seed: 4, ..scenario("S.3").unwrap() };
    let sim = generate_dataset(&c).unwrap();
    assert_eq!(sim.dataset.n_subjects(), 50);
    assert!(sim.has_truth());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_deterministic(seed in any::<u64>(), r in 0usize..5) {
        let c = replicate_config(&ScenarioConfig { n_subjects: 20, seed, ..scenario("D.2").unwrap() }, r);
        let a = generate_dataset(&c).unwrap();
        let b = generate_dataset(&c).unwrap();
        prop_assert_eq!(a.dataset, b.dataset);
        prop_assert_eq!(a.effects, b.effects);
    }
}
