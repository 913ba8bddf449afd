//! Shared fixtures and independent numerical oracles for integration tests.
#![allow(dead_code)]

use mbsma::joint_model::{
    cumulative_hazard, hazard, marker_loglik, MarkerParams, MarkerSpec, ModelSpec, ParameterVector, ResolvedModel, Term,
};
use mbsma::simulation::{generate_dataset, scenario, CensoringConfig, ScenarioConfig, SimAssociation, SimulatedData};
use mbsma::{Dataset, MarkerFamily, MarkerMeta, SubjectHistory, SubjectId, SurvivalRecord};

/// Survival-only dataset with ids `1..=n` and one Gaussian marker without
/// observations.
pub fn survival_dataset(rows: &[(f64, bool)]) -> Dataset {
    let subjects = rows
        .iter()
        .enumerate()
        .map(|(i, &(t, e))| SurvivalRecord {
            subject: SubjectId(i as u64 + 1),
            observed_time: t,
            event: e,
            covariates: vec![],
        })
        .collect();
    let markers = vec![MarkerMeta { name: "y".into(), family: MarkerFamily::Gaussian }];
    Dataset::new(subjects, vec![], markers, vec![]).unwrap()
}

/// One Gaussian marker from the first block of scenario I.1.
pub fn one_marker_config(n: usize, seed: u64) -> ScenarioConfig {
    let base = scenario("I.1").unwrap();
    ScenarioConfig {
        name: "one-marker".into(),
        markers: vec![base.markers[0].clone()],
        re_covariance: vec![base.re_covariance[0][..2].to_vec(), base.re_covariance[1][..2].to_vec()],
        association: SimAssociation::Constant { alpha: vec![-0.5] },
        n_subjects: n,
        seed,
        ..base
    }
}

pub fn simulate(config: &ScenarioConfig) -> SimulatedData {
    generate_dataset(config).unwrap()
}

/// Random intercept only: `m(t) = β0 + β1 t + b0`.
pub fn intercept_spec(marker: usize, knots: Vec<f64>) -> ModelSpec {
    let mut spec = ModelSpec::linear(&[marker], knots.len());
    spec.markers[0] =
        MarkerSpec { marker_id: marker, fixed: vec![Term::Intercept, Term::Time], random: vec![Term::Intercept] };
    spec.baseline.knots = Some(knots);
    spec
}

pub fn slope_spec(marker: usize, knots: Vec<f64>) -> ModelSpec {
    let mut spec = ModelSpec::linear(&[marker], knots.len());
    spec.baseline.knots = Some(knots);
    spec
}

/// Parameters near the generating values of [`one_marker_config`].
pub fn toy_parameters(model: &ResolvedModel) -> ParameterVector {
    let d = model.re_dim;
    let cov: Vec<f64> = if d == 1 { vec![1.0] } else { vec![1.0, 0.5, 0.5, 1.0] };
    ParameterVector::with_covariance(
        vec![MarkerParams { beta: vec![0.0, -1.0], variance: Some(0.5) }],
        &cov,
        vec![],
        vec![-0.5],
        vec![0.07; model.n_pieces()],
    )
    .unwrap()
}

/// Composite Simpson weights on `n` (odd) equally spaced points.
pub fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    assert!(n % 2 == 1 && n >= 3);
    (0..n)
        .map(|i| {
            let c = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect()
}

/// Log of the joint density of one subject's data given `b`.
pub fn subject_log_density(
    model: &ResolvedModel,
    params: &ParameterVector,
    dataset: &Dataset,
    index: usize,
    b: &[f64],
) -> f64 {
    let rec = &dataset.subjects()[index];
    let obs = dataset.subject_observations(index);
    let mut ll = 0.0;
    for (slot, m) in model.markers.iter().enumerate() {
        let own: Vec<_> = obs.iter().copied().filter(|o| o.marker == m.index).collect();
        ll += marker_loglik(model, params, b, slot, &rec.covariates, &own).unwrap();
    }
    if rec.event {
        ll += hazard(model, params, b, &rec.covariates, rec.observed_time).unwrap().ln();
    }
    ll - cumulative_hazard(model, params, b, &rec.covariates, rec.observed_time).unwrap()
}

fn log_normal_density(b: &[f64], cov: &[f64]) -> f64 {
    let d = b.len();
    let (det, inv) = match d {
        1 => (cov[0], vec![1.0 / cov[0]]),
        2 => {
            let det = cov[0] * cov[3] - cov[1] * cov[2];
            (det, vec![cov[3] / det, -cov[1] / det, -cov[2] / det, cov[0] / det])
        }
        _ => panic!("oracle supports 1 or 2 dimensions"),
    };
    let mut q = 0.0;
    for i in 0..d {
        for j in 0..d {
            q += b[i] * inv[i * d + j] * b[j];
        }
    }
    -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + q)
}

/// Marginal log-likelihood by brute-force Simpson integration over a box of
/// `±half_width` prior standard deviations with `n` points per axis.
pub fn grid_loglik(
    model: &ResolvedModel,
    params: &ParameterVector,
    dataset: &Dataset,
    n: usize,
    half_width: f64,
) -> f64 {
    let cov = params.re_covariance();
    let d = model.re_dim;
    let sd: Vec<f64> = (0..d).map(|i| cov[i * d + i].sqrt()).collect();
    let axes: Vec<(Vec<f64>, Vec<f64>)> = sd
        .iter()
        .map(|s| {
            let h = 2.0 * half_width * s / (n - 1) as f64;
            ((0..n).map(|i| -half_width * s + i as f64 * h).collect(), simpson_weights(n, h))
        })
        .collect();
    let mut total = 0.0;
    for i in 0..dataset.n_subjects() {
        let mut vals = Vec::new();
        match d {
            1 => {
                for (x, w) in axes[0].0.iter().zip(&axes[0].1) {
                    let b = [*x];
                    vals.push((
                        w.ln(),
                        subject_log_density(model, params, dataset, i, &b) + log_normal_density(&b, &cov),
                    ));
                }
            }
            2 => {
                for (x, wx) in axes[0].0.iter().zip(&axes[0].1) {
                    for (y, wy) in axes[1].0.iter().zip(&axes[1].1) {
                        let b = [*x, *y];
                        vals.push((
                            (wx * wy).ln(),
                            subject_log_density(model, params, dataset, i, &b) + log_normal_density(&b, &cov),
                        ));
                    }
                }
            }
            _ => panic!("oracle supports 1 or 2 dimensions"),
        }
        let top = vals.iter().map(|(lw, v)| lw + v).fold(f64::NEG_INFINITY, f64::max);
        total += top + vals.iter().map(|(lw, v)| (lw + v - top).exp()).sum::<f64>().ln();
    }
    total
}

/// `π(s,t)` for one history by grid integration over `b` (1-D models only):
/// `1 − ∫ S(s+t|b)/S(s|b) p(b | history, T > s) db`.
pub fn grid_risk(model: &ResolvedModel, params: &ParameterVector, history: &SubjectHistory, t: f64) -> f64 {
    assert_eq!(model.re_dim, 1);
    let cov = params.re_covariance();
    let sd = cov[0].sqrt();
    let n = 40_001;
    let half = 12.0;
    let h = 2.0 * half * sd / (n - 1) as f64;
    let w = simpson_weights(n, h);
    let s = history.landmark;
    let mut logs = Vec::with_capacity(n);
    let mut ratio = Vec::with_capacity(n);
    for i in 0..n {
        let b = [-half * sd + i as f64 * h];
        let mut ll = log_normal_density(&b, &cov);
        for (slot, m) in model.markers.iter().enumerate() {
            let own: Vec<_> = history.observations.iter().copied().filter(|o| o.marker == m.index).collect();
            ll += marker_loglik(model, params, &b, slot, &history.covariates, &own).unwrap();
        }
        let cs = cumulative_hazard(model, params, &b, &history.covariates, s).unwrap();
        ll -= cs;
        logs.push(w[i].ln() + ll);
        let cst = cumulative_hazard(model, params, &b, &history.covariates, s + t).unwrap();
        ratio.push((cs - cst).exp());
    }
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for (l, r) in logs.iter().zip(&ratio) {
        let p = (l - top).exp();
        num += p * r;
        den += p;
    }
    1.0 - num / den
}

/// Random weighting instance: `k` prediction columns for `n` subjects with
/// random censoring, evaluated at `s = 0`, `t = 1`.
pub fn random_instance(
    seed: u64,
    k: usize,
    n: usize,
) -> (mbsma::averaging::PredictionMatrix, mbsma::metrics::RiskSetFrame) {
    use rand::Rng;
    let mut rng = mbsma::seeds::rng_from(seed);
    loop {
        let rows: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let t: f64 = rng.random_range(0.05..2.0);
                let c: f64 = rng.random_range(0.05..4.0);
                (t.min(c), t <= c)
            })
            .collect();
        let d = survival_dataset(&rows);
        let Ok(frame) = mbsma::metrics::ipcw_frame(&d, 0.0, 1.0) else { continue };
        if frame.weight.iter().all(|w| *w == 0.0) {
            continue;
        }
        // Columns share a signal so that they are correlated, as real model
        // predictions are.
        let signal: Vec<f64> = frame.event.iter().map(|e| if *e { 0.6 } else { 0.3 }).collect();
        let cols: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let noise: f64 = rng.random_range(0.05..0.5);
                signal.iter().map(|s| (s + noise * (rng.random::<f64>() - 0.5) * 2.0).clamp(0.0, 1.0)).collect()
            })
            .collect();
        let vars: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random_range(0.0..0.02)).collect()).collect();
        let ids = (1..=k).map(|j| format!("m{j}")).collect();
        let m = mbsma::averaging::PredictionMatrix::from_columns(0.0, 1.0, frame.subjects.clone(), ids, &cols, &vars)
            .unwrap();
        return (m, frame);
    }
}

/// Grid search over the simplex with step `1/steps` on the first `k − 1`
/// coordinates (`k ≤ 4`); the last free direction is minimized exactly, so
/// the result is never above the plain grid minimum.
pub fn grid_simplex_minimum(obj: &mbsma::averaging::QuadraticObjective, steps: usize) -> f64 {
    let k = obj.k;
    assert!((2..=4).contains(&k));
    let f = |w: &[f64]| obj.value(w);
    // Exact minimum of f along w(x) = base + x e_a + (rest − x) e_b, x ∈ [0, rest].
    let line = |base: &mut Vec<f64>, a: usize, b: usize, rest: f64| -> f64 {
        base[a] = 0.0;
        base[b] = rest;
        let f0 = f(base);
        base[a] = rest;
        base[b] = 0.0;
        let f1 = f(base);
        base[a] = rest / 2.0;
        base[b] = rest / 2.0;
        let fm = f(base);
        // f is quadratic in x: fit through x = 0, rest/2, rest.
        let mut best = f0.min(f1);
        let a2 = 2.0 * (f0 + f1 - 2.0 * fm);
        let a1 = 4.0 * fm - 3.0 * f0 - f1;
        if a2 > 0.0 && rest > 0.0 {
            let x = -a1 / (2.0 * a2) * rest;
            if x > 0.0 && x < rest {
                base[a] = x;
                base[b] = rest - x;
                best = best.min(f(base));
            }
        }
        best
    };
    let h = 1.0 / steps as f64;
    let mut best = f64::INFINITY;
    match k {
        2 => best = line(&mut vec![0.0; 2], 0, 1, 1.0),
        3 => {
            for i in 0..=steps {
                let w0 = i as f64 * h;
                let mut w = vec![w0, 0.0, 0.0];
                best = best.min(line(&mut w, 1, 2, (1.0 - w0).max(0.0)));
            }
        }
        _ => {
            for i in 0..=steps {
                for j in 0..=(steps - i) {
                    let (w0, w1) = (i as f64 * h, j as f64 * h);
                    let mut w = vec![w0, w1, 0.0, 0.0];
                    best = best.min(line(&mut w, 2, 3, (1.0 - w0 - w1).max(0.0)));
                }
            }
        }
    }
    best
}

/// `Λ(t; b)` by Simpson integration of the generating hazard.
pub fn oracle_cumhaz(config: &ScenarioConfig, b: &[f64], t: f64) -> f64 {
    let n = 2001;
    let h = t / (n - 1) as f64;
    let w = simpson_weights(n, h);
    (0..n)
        .map(|i| {
            let u = i as f64 * h;
            let lp: f64 = config
                .markers
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let alpha = match &config.association {
                        SimAssociation::Constant { alpha } => alpha[k],
                        SimAssociation::TimeVarying { intercept, slope } => intercept[k] + slope[k] * u,
                    };
                    alpha * (m.beta[0] + b[2 * k] + (m.beta[1] + b[2 * k + 1]) * u)
                })
                .sum();
            w[i] * config.baseline_hazard * lp.exp()
        })
        .sum()
}

/// The configuration with `b` folded into the fixed effects and no
/// random-effect variation, so that every subject shares the effects `b`.
pub fn with_fixed_effects(config: &ScenarioConfig, b: &[f64], n: usize, seed: u64) -> ScenarioConfig {
    let mut c = config.clone();
    for (k, m) in c.markers.iter_mut().enumerate() {
        m.beta[0] += b[2 * k];
        m.beta[1] += b[2 * k + 1];
    }
    let d = 2 * c.markers.len();
    c.re_covariance = vec![vec![0.0; d]; d];
    c.censoring = CensoringConfig { rate: Some(0.0), target_fraction: 0.0, ..CensoringConfig::default() };
    c.n_subjects = n;
    c.seed = seed;
    c
}

/// Deviations, in binomial standard errors, between the empirical survival
/// of 10 000 subjects sharing the effects `b` and `exp(−Λ(t; b))`.
pub fn survival_z_scores(config: &ScenarioConfig, b: &[f64], times: &[f64]) -> Vec<f64> {
    let n = 10_000;
    let sim = generate_dataset(&with_fixed_effects(config, b, n, 17)).unwrap();
    times
        .iter()
        .map(|&t| {
            let alive = sim.dataset.subjects().iter().filter(|r| !(r.event && r.observed_time <= t)).count();
            let emp = alive as f64 / n as f64;
            let truth = (-oracle_cumhaz(config, b, t)).exp();
            let se = (truth * (1.0 - truth) / n as f64).sqrt();
            (emp - truth).abs() / se
        })
        .collect()
}
