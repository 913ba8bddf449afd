//! Synthetic data from all-marker joint models with linear marker
//! trajectories, a constant baseline hazard and current-value association.
//!
//! Event times are drawn by inverting the cumulative hazard. With constant
//! association the log hazard is linear in time and the inversion is in
//! closed form; with linearly time-varying association it is quadratic, and
//! the cumulative hazard is integrated by adaptive Simpson with the root
//! bracketed by bisection.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LongitudinalObservation, MarkerFamily, MarkerMeta, SubjectId, SurvivalRecord};
use crate::error::{DataError, Error};
use crate::io;
use crate::seeds::{derive_seed, rng_from};

pub const TRUE_EFFECTS_FILE: &str = "true_effects.csv";
pub const SCENARIO_FILE: &str = "scenario.json";

const SUBJECT_TAG: u64 = 0x7375_626a;
const PILOT_TAG: u64 = 0x7069_6c6f;
const SOURCE_TAG: u64 = 0x736f_7572;
const BOOT_TAG: u64 = 0x626f_6f74;
const PILOT_SIZE: usize = 4000;
const PILOT_SEED: u64 = 20_240_917;
const ROOT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimMarker {
    pub name: String,
    pub family: MarkerFamily,
    /// `(β0, β1)`.
    pub beta: [f64; 2],
    /// Residual variance, ignored for binary markers.
    #[serde(default)]
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimAssociation {
    /// `Σ_k α_k m_k(t)`.
    Constant { alpha: Vec<f64> },
    /// `Σ_k (α_0k + α_1k t) m_k(t)`.
    TimeVarying { intercept: Vec<f64>, slope: Vec<f64> },
}

impl SimAssociation {
    fn len(&self) -> usize {
        match self {
            SimAssociation::Constant { alpha } => alpha.len(),
            SimAssociation::TimeVarying { intercept, .. } => intercept.len(),
        }
    }

    fn at(&self, k: usize) -> (f64, f64) {
        match self {
            SimAssociation::Constant { alpha } => (alpha[k], 0.0),
            SimAssociation::TimeVarying { intercept, slope } => (intercept[k], slope[k]),
        }
    }
}

/// Weibull censoring `P(C > u) = exp(−(rate·u)^shape)` plus administrative
/// censoring at `cutoff`. When `rate` is absent it is tuned so that the
/// expected fraction censored before the cutoff equals `target_fraction`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensoringConfig {
    pub shape: f64,
    #[serde(default)]
    pub rate: Option<f64>,
    pub target_fraction: f64,
    pub cutoff: f64,
}

impl Default for CensoringConfig {
    fn default() -> Self {
        Self { shape: 1.0, rate: None, target_fraction: 0.25, cutoff: 2.0 }
    }
}

/// Resample subjects of a source dataset instead of generating from the
/// model. Without a path the source is generated from the rest of the
/// configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    #[serde(default)]
    pub source: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub markers: Vec<SimMarker>,
    /// Covariance of `(b_01, b_11, …, b_0K, b_1K)`, row by row.
    pub re_covariance: Vec<Vec<f64>>,
    pub association: SimAssociation,
    pub baseline_hazard: f64,
    #[serde(default)]
    pub censoring: CensoringConfig,
    pub visit_times: Vec<f64>,
    pub n_subjects: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ScenarioConfig {
    pub fn n_markers(&self) -> usize {
        self.markers.len()
    }

    pub fn validate(&self) -> Result<(), Error> {
        let k = self.markers.len();
        if k == 0 {
            return Err(config_err("scenario has no markers"));
        }
        if self.association.len() != k {
            return Err(config_err(format!("association has {} entries for {k} markers", self.association.len())));
        }
        if let SimAssociation::TimeVarying { intercept, slope } = &self.association {
            if intercept.len() != slope.len() {
                return Err(config_err("time-varying association intercepts and slopes differ in length"));
            }
        }
        let d = 2 * k;
        if self.re_covariance.len() != d || self.re_covariance.iter().any(|r| r.len() != d) {
            return Err(config_err(format!("random-effect covariance must be {d}x{d}")));
        }
        let b = self.covariance_matrix();
        if (&b - b.transpose()).abs().max() > 1e-12 {
            return Err(config_err("random-effect covariance is not symmetric"));
        }
        let min_eig = b.symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-10 {
            return Err(config_err(format!("random-effect covariance is not PSD (eigenvalue {min_eig})")));
        }
        for m in &self.markers {
            if m.family.has_dispersion() && !(m.variance >= 0.0 && m.variance.is_finite()) {
                return Err(config_err(format!("marker {}: variance must be nonnegative", m.name)));
            }
        }
        if !(self.baseline_hazard > 0.0 && self.baseline_hazard.is_finite()) {
            return Err(config_err("baseline hazard must be positive"));
        }
        let c = &self.censoring;
        if !(c.shape > 0.0 && c.cutoff > 0.0) || !(0.0..1.0).contains(&c.target_fraction) {
            return Err(config_err("invalid censoring configuration"));
        }
        if c.rate.is_some_and(|r| !(r >= 0.0 && r.is_finite())) {
            return Err(config_err("censoring rate must be nonnegative"));
        }
        if self.visit_times.is_empty()
            || self.visit_times.windows(2).any(|w| w[1] <= w[0])
            || self.visit_times[0] < 0.0
            || *self.visit_times.last().unwrap() > c.cutoff
        {
            return Err(config_err("visit times must be increasing, nonnegative and within the cutoff"));
        }
        if self.n_subjects == 0 {
            return Err(config_err("n_subjects must be positive"));
        }
        Ok(())
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let d = self.re_covariance.len();
        DMatrix::from_fn(d, d, |i, j| self.re_covariance[i][j])
    }

    pub fn marker_meta(&self) -> Vec<MarkerMeta> {
        self.markers.iter().map(|m| MarkerMeta { name: m.name.clone(), family: m.family }).collect()
    }
}

/// Coefficients of the log hazard `q0 + q1 u + q2 u²` given random effects.
fn exponent(config: &ScenarioConfig, b: &[f64]) -> [f64; 3] {
    let mut q = [0.0; 3];
    for (k, m) in config.markers.iter().enumerate() {
        let a = m.beta[0] + b[2 * k];
        let c = m.beta[1] + b[2 * k + 1];
        let (a0, a1) = config.association.at(k);
        q[0] += a0 * a;
        q[1] += a0 * c + a1 * a;
        q[2] += a1 * c;
    }
    q
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    if b <= a {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// `∫_l^r λ0 exp(q0 + q1 u + q2 u²) du`.
fn interval_hazard(lambda0: f64, q: [f64; 3], l: f64, r: f64) -> f64 {
    if r <= l {
        return 0.0;
    }
    if q[2] == 0.0 {
        let x = q[1] * (r - l);
        let j = if x.abs() < 1e-12 { r - l } else { x.exp_m1() / q[1] };
        lambda0 * (q[0] + q[1] * l).exp() * j
    } else {
        let f = |u: f64| lambda0 * (q[0] + u * (q[1] + u * q[2])).exp();
        adaptive_simpson(&f, l, r, 1e-13 * f(l).max(f(r)).max(1e-300))
    }
}

/// Generating cumulative hazard `Λ(t; b)`.
pub fn true_cumulative_hazard(config: &ScenarioConfig, b: &[f64], t: f64) -> f64 {
    interval_hazard(config.baseline_hazard, exponent(config, b), 0.0, t)
}

/// `1 − exp(−(Λ(s+t; b) − Λ(s; b)))` under the generating model.
pub fn true_risk(config: &ScenarioConfig, b: &[f64], s: f64, t: f64) -> f64 {
    let h = interval_hazard(config.baseline_hazard, exponent(config, b), s, s + t);
    -(-h).exp_m1()
}

/// Solve `Λ(T) = e` for `T ≤ horizon`; `None` when `Λ(horizon) < e`.
fn invert_cumhaz(config: &ScenarioConfig, q: [f64; 3], e: f64, horizon: f64) -> Option<f64> {
    let l0 = config.baseline_hazard;
    if q[2] == 0.0 {
        let scaled = e / (l0 * q[0].exp());
        let t = if q[1].abs() * scaled < 1e-12 {
            scaled
        } else {
            let arg = q[1] * scaled;
            if arg <= -1.0 {
                return None;
            }
            arg.ln_1p() / q[1]
        };
        return (t <= horizon).then_some(t);
    }
    if interval_hazard(l0, q, 0.0, horizon) < e {
        return None;
    }
    let (mut lo, mut hi) = (0.0, horizon);
    let mut acc = 0.0;
    while hi - lo > ROOT_TOL {
        let mid = 0.5 * (lo + hi);
        let part = acc + interval_hazard(l0, q, lo, mid);
        if part < e {
            lo = mid;
            acc = part;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Factor `A` with `A A' = B`, from Cholesky when possible and from the
/// clipped eigendecomposition otherwise.
fn covariance_factor(b: &DMatrix<f64>) -> DMatrix<f64> {
    match b.clone().cholesky() {
        Some(c) => c.l(),
        None => {
            let e = b.clone().symmetric_eigen();
            &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()))
        }
    }
}

fn draw_effects<R: Rng>(factor: &DMatrix<f64>, rng: &mut R) -> Vec<f64> {
    let d = factor.nrows();
    let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    (0..d).map(|i| (0..d).map(|j| factor[(i, j)] * z[j]).sum()).collect()
}

fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Uncensored event time of one subject (capped at the cutoff) and the
/// uniform used for its censoring time. Both come from the subject's own
/// stream so censoring settings never shift the event times.
struct SubjectDraw {
    b: Vec<f64>,
    event_time: Option<f64>,
    censor_exp: f64,
}

fn draw_subject(config: &ScenarioConfig, factor: &DMatrix<f64>, seed: u64) -> (SubjectDraw, rand_chacha::ChaCha8Rng) {
    let mut rng = rng_from(seed);
    let b = draw_effects(factor, &mut rng);
    let u: f64 = rng.random();
    let e = -(1.0 - u).ln();
    let event_time = invert_cumhaz(config, exponent(config, &b), e, config.censoring.cutoff);
    let v: f64 = rng.random();
    let censor_exp = -(1.0 - v).ln();
    (SubjectDraw { b, event_time, censor_exp }, rng)
}

/// Weibull censoring time from a unit exponential draw.
fn censor_time(c: &CensoringConfig, rate: f64, unit_exp: f64) -> f64 {
    if rate <= 0.0 {
        f64::INFINITY
    } else {
        unit_exp.powf(1.0 / c.shape) / rate
    }
}

/// Rate giving the target expected fraction censored before
/// `min(T, cutoff)`, estimated on a fixed pilot sample so the tuned value
/// depends only on the generative parameters.
pub fn tune_censoring_rate(config: &ScenarioConfig) -> f64 {
    let c = &config.censoring;
    if c.target_fraction <= 0.0 {
        return 0.0;
    }
    let factor = covariance_factor(&config.covariance_matrix());
    let exits: Vec<f64> = (0..PILOT_SIZE)
        .map(|i| {
            let (d, _) = draw_subject(config, &factor, derive_seed(PILOT_SEED, &[PILOT_TAG, i as u64]));
            d.event_time.unwrap_or(c.cutoff)
        })
        .collect();
    let frac =
        |rate: f64| exits.iter().map(|x| -(-(rate * x).powf(c.shape)).exp_m1()).sum::<f64>() / exits.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    while frac(hi) < c.target_fraction && hi < 1e6 {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < c.target_fraction {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// A generated dataset with the true random effects of every subject.
#[derive(Clone, Debug)]
pub struct SimulatedData {
    pub dataset: Dataset,
    /// True `b` per subject, sorted by id; empty when unknown.
    pub effects: Vec<(SubjectId, Vec<f64>)>,
    /// Configuration with the censoring rate actually used.
    pub config: ScenarioConfig,
}

impl SimulatedData {
    pub fn effect(&self, id: SubjectId) -> Option<&[f64]> {
        self.effects.binary_search_by_key(&id, |e| e.0).ok().map(|i| self.effects[i].1.as_slice())
    }

    pub fn has_truth(&self) -> bool {
        !self.effects.is_empty()
    }

    /// True risks for the given subjects, `None` without true effects.
    pub fn true_risks(&self, ids: &[SubjectId], s: f64, t: f64) -> Option<Vec<f64>> {
        ids.iter().map(|id| self.effect(*id).map(|b| true_risk(&self.config, b, s, t))).collect()
    }
}

fn generate_model(config: &ScenarioConfig, seed: u64) -> Result<SimulatedData, Error> {
    let mut config = config.clone();
    let rate = match config.censoring.rate {
        Some(r) => r,
        None => tune_censoring_rate(&config),
    };
    config.censoring.rate = Some(rate);
    let factor = covariance_factor(&config.covariance_matrix());
    let cutoff = config.censoring.cutoff;
    let mut subjects = Vec::with_capacity(config.n_subjects);
    let mut observations = Vec::new();
    let mut effects = Vec::with_capacity(config.n_subjects);
    for i in 0..config.n_subjects {
        let id = SubjectId(i as u64 + 1);
        let (draw, mut rng) = draw_subject(&config, &factor, derive_seed(seed, &[SUBJECT_TAG, i as u64]));
        let c = censor_time(&config.censoring, rate, draw.censor_exp).min(cutoff);
        let (time, event) = match draw.event_time {
            Some(t) if t <= c => (t, true),
            _ => (c, false),
        };
        for (k, m) in config.markers.iter().enumerate() {
            let a = m.beta[0] + draw.b[2 * k];
            let slope = m.beta[1] + draw.b[2 * k + 1];
            for &v in &config.visit_times {
                let mean = a + slope * v;
                let noise: f64 = rng.sample(StandardNormal);
                let u: f64 = rng.random();
                if v > time {
                    continue;
                }
                let value = match m.family {
                    MarkerFamily::Gaussian => mean + m.variance.sqrt() * noise,
                    MarkerFamily::Binary => f64::from(u8::from(u < expit(mean))),
                };
                observations.push(LongitudinalObservation { subject: id, marker: k, time: v, value });
            }
        }
        subjects.push(SurvivalRecord { subject: id, observed_time: time, event, covariates: Vec::new() });
        effects.push((id, draw.b));
    }
    let dataset = Dataset::new(subjects, observations, config.marker_meta(), Vec::new())?;
    Ok(SimulatedData { dataset, effects, config })
}

/// Generate one dataset from the configuration.
pub fn generate_dataset(config: &ScenarioConfig) -> Result<SimulatedData, Error> {
    config.validate()?;
    match &config.bootstrap {
        None => generate_model(config, config.seed),
        Some(boot) => {
            let source = match &boot.source {
                Some(path) => SimulatedData {
                    dataset: io::read_dataset(Path::new(path))?,
                    effects: Vec::new(),
                    config: config.clone(),
                },
                None => generate_model(config, derive_seed(config.seed, &[SOURCE_TAG]))?,
            };
            let (dataset, origin) = resample(&source.dataset, config.n_subjects, config.seed)?;
            let effects = if source.has_truth() {
                origin
                    .iter()
                    .enumerate()
                    .map(|(i, src)| (SubjectId(i as u64 + 1), source.effect(*src).unwrap().to_vec()))
                    .collect()
            } else {
                Vec::new()
            };
            Ok(SimulatedData { dataset, effects, config: source.config })
        }
    }
}

/// Subject-level resample of `n` subjects with fresh ids `1..=n`; also
/// returns the source id of every new subject.
fn resample(dataset: &Dataset, n: usize, seed: u64) -> Result<(Dataset, Vec<SubjectId>), DataError> {
    let mut rng = rng_from(derive_seed(seed, &[BOOT_TAG]));
    let ids = dataset.subject_ids();
    let origin: Vec<SubjectId> = (0..n).map(|_| *ids.choose(&mut rng).expect("nonempty dataset")).collect();
    let mut subjects = Vec::with_capacity(n);
    let mut observations = Vec::new();
    for (i, src) in origin.iter().enumerate() {
        let id = SubjectId(i as u64 + 1);
        let idx = dataset.subject_index(*src).expect("id from dataset");
        let mut rec = dataset.subjects()[idx].clone();
        rec.subject = id;
        subjects.push(rec);
        observations
            .extend(dataset.subject_observations(idx).iter().map(|o| LongitudinalObservation { subject: id, ..*o }));
    }
    let out = Dataset::new(subjects, observations, dataset.markers().to_vec(), dataset.covariate_names().to_vec())?;
    Ok((out, origin))
}

/// Resample subjects with replacement, keeping the sample size; resampled
/// subjects get fresh ids.
pub fn bootstrap_mimic(dataset: &Dataset, seed: u64) -> Result<Dataset, DataError> {
    resample(dataset, dataset.n_subjects(), seed).map(|r| r.0)
}

fn block_covariance(k: usize, diag: [[f64; 2]; 2], off: [[f64; 2]; 2]) -> Vec<Vec<f64>> {
    (0..2 * k)
        .map(|i| (0..2 * k).map(|j| if i / 2 == j / 2 { diag[i % 2][j % 2] } else { off[i % 2][j % 2] }).collect())
        .collect()
}

const B_STAR: [[f64; 2]; 2] = [[1.0, 0.5], [0.5, 1.0]];
const B_DAGGER: [[f64; 2]; 2] = [[0.5, 0.5], [0.5, 0.5]];
const ZERO_BLOCK: [[f64; 2]; 2] = [[0.0, 0.0], [0.0, 0.0]];
const ALPHA_SETS: [[f64; 3]; 3] = [[-0.5, -0.5, -0.5], [0.0, -0.5, -0.5], [0.0, -0.5, -1.0]];

/// Baseline hazards per scenario, chosen so that about 40 to 50 percent of
/// subjects have an observed event before the cutoff.
const BASELINE: &[(&str, f64)] = &[
    ("I.1", 0.07),
    ("I.2", 0.12),
    ("I.3", 0.06),
    ("D.1", 0.06),
    ("D.2", 0.10),
    ("D.3", 0.06),
    ("M.1", 0.06),
    ("M.2", 0.10),
    ("M.3", 0.06),
    ("S.1", 0.06),
    ("S.2", 0.04),
    ("S.3", 0.06),
    ("4", 0.25),
];

pub const SCENARIOS: [&str; 13] =
    ["I.1", "I.2", "I.3", "D.1", "D.2", "D.3", "M.1", "M.2", "M.3", "S.1", "S.2", "S.3", "4"];

fn gaussian(k: usize, beta: [f64; 2], variance: f64) -> SimMarker {
    SimMarker { name: format!("y{k}"), family: MarkerFamily::Gaussian, beta, variance }
}

fn binary(k: usize, beta: [f64; 2]) -> SimMarker {
    SimMarker { name: format!("y{k}"), family: MarkerFamily::Binary, beta, variance: 0.0 }
}

fn visit_grid() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) * 0.2).collect()
}

/// Registry of named scenarios with default sample size 1000.
pub fn scenario(name: &str) -> Result<ScenarioConfig, Error> {
    let baseline = BASELINE
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, v)| *v)
        .ok_or_else(|| config_err(format!("unknown scenario {name:?}; known: {}", SCENARIOS.join(", "))))?;
    let three = |family_of: &dyn Fn(usize) -> SimMarker, off, alpha: [f64; 3]| ScenarioConfig {
        name: name.to_string(),
        markers: (1..=3).map(family_of).collect(),
        re_covariance: block_covariance(3, B_STAR, off),
        association: SimAssociation::Constant { alpha: alpha.to_vec() },
        baseline_hazard: baseline,
        censoring: CensoringConfig::default(),
        visit_times: visit_grid(),
        n_subjects: 1000,
        seed: 0,
        bootstrap: None,
    };
    let seven = |alpha: [f64; 7]| ScenarioConfig {
        name: name.to_string(),
        markers: (1..=7).map(|k| if k == 1 { binary(k, [0.0, -1.0]) } else { gaussian(k, [0.0, -1.0], 0.5) }).collect(),
        re_covariance: block_covariance(7, B_STAR, B_DAGGER),
        association: SimAssociation::Constant { alpha: alpha.to_vec() },
        baseline_hazard: baseline,
        censoring: CensoringConfig::default(),
        visit_times: visit_grid(),
        n_subjects: 1000,
        seed: 0,
        bootstrap: None,
    };
    let set = |n: &str| ALPHA_SETS[n.as_bytes()[2] as usize - b'1' as usize];
    let gauss3 = |k| gaussian(k, [0.0, -1.0], 0.5);
    let mixed3 = |k| if k == 3 { binary(k, [0.0, -1.0]) } else { gaussian(k, [0.0, -1.0], 0.5) };
    Ok(match name {
        "I.1" | "I.2" | "I.3" => three(&gauss3, ZERO_BLOCK, set(name)),
        "D.1" | "D.2" | "D.3" => three(&gauss3, B_DAGGER, set(name)),
        "M.1" | "M.2" | "M.3" => three(&mixed3, B_DAGGER, set(name)),
        "S.1" => seven([-0.5, -0.5, -0.5, 0.0, 0.0, 0.0, 0.0]),
        "S.2" => seven([-0.5, -0.5, -1.0, 0.0, 0.0, 0.0, 0.0]),
        "S.3" => ScenarioConfig {
            bootstrap: Some(BootstrapConfig::default()),
            ..seven([-0.5, -0.5, -0.5, 0.0, 0.0, 0.0, 0.0])
        },
        _ => {
            let b1 = [[0.69, 0.01], [0.01, 0.26]];
            let b2 = [[0.74, -0.01], [-0.01, 0.20]];
            let mut cov = block_covariance(2, b1, ZERO_BLOCK);
            for i in 0..2 {
                for j in 0..2 {
                    cov[2 + i][2 + j] = b2[i][j];
                }
            }
            ScenarioConfig {
                name: name.to_string(),
                markers: vec![gaussian(1, [0.13, -0.76], 0.56 * 0.56), gaussian(2, [0.18, -0.62], 0.65 * 0.65)],
                re_covariance: cov,
                association: SimAssociation::TimeVarying { intercept: vec![-0.8, 0.0], slope: vec![0.4, -0.4] },
                baseline_hazard: baseline,
                censoring: CensoringConfig::default(),
                visit_times: visit_grid(),
                n_subjects: 1000,
                seed: 0,
                bootstrap: None,
            }
        }
    })
}

/// Scenario request as read from `scenario.json`: either a registry name
/// with overrides or a full configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRequest {
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub config: Option<ScenarioConfig>,
    #[serde(default)]
    pub n_subjects: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub baseline_hazard: Option<f64>,
    #[serde(default)]
    pub censoring_target: Option<f64>,
    #[serde(default)]
    pub replicates: Option<usize>,
}

impl ScenarioRequest {
    pub fn resolve(&self) -> Result<ScenarioConfig, Error> {
        let mut config = match (&self.scenario, &self.config) {
            (Some(name), None) => scenario(name)?,
            (None, Some(c)) => c.clone(),
            _ => return Err(config_err("exactly one of `scenario` and `config` must be given")),
        };
        if let Some(n) = self.n_subjects {
            config.n_subjects = n;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(h) = self.baseline_hazard {
            config.baseline_hazard = h;
        }
        if let Some(t) = self.censoring_target {
            config.censoring.target_fraction = t;
            config.censoring.rate = None;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn replicates(&self) -> usize {
        self.replicates.unwrap_or(1)
    }
}

/// Configuration of replicate `r`: the seed is derived from the base seed.
pub fn replicate_config(config: &ScenarioConfig, replicate: usize) -> ScenarioConfig {
    ScenarioConfig { seed: derive_seed(config.seed, &[replicate as u64]), ..config.clone() }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// Write the dataset, `true_effects.csv` and the resolved `scenario.json`.
pub fn write_simulation(sim: &SimulatedData, dir: &Path) -> Result<(), DataError> {
    io::write_dataset(&sim.dataset, dir)?;
    let path = dir.join(TRUE_EFFECTS_FILE);
    let csv_err = |source| DataError::Csv { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    let d = 2 * sim.config.n_markers();
    let mut header = vec!["subject_id".to_string()];
    for k in 1..=sim.config.n_markers() {
        header.push(format!("b0_{k}"));
        header.push(format!("b1_{k}"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for (id, b) in &sim.effects {
        debug_assert_eq!(b.len(), d);
        let mut rec = vec![id.to_string()];
        rec.extend(b.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    let cpath = dir.join(SCENARIO_FILE);
    let json = serde_json::to_string_pretty(&sim.config)
        .map_err(|source| DataError::Json { path: cpath.display().to_string(), source })?;
    std::fs::write(&cpath, json + "\n").map_err(|e| io_err(&cpath, e))
}

/// Read a directory written by [`write_simulation`].
pub fn read_simulation(dir: &Path) -> Result<SimulatedData, DataError> {
    let dataset = io::read_dataset(dir)?;
    let cpath = dir.join(SCENARIO_FILE);
    let text = std::fs::read_to_string(&cpath).map_err(|e| io_err(&cpath, e))?;
    let config: ScenarioConfig =
        serde_json::from_str(&text).map_err(|source| DataError::Json { path: cpath.display().to_string(), source })?;
    let path = dir.join(TRUE_EFFECTS_FILE);
    let mut effects = Vec::new();
    if path.exists() {
        let mut rdr = csv::Reader::from_path(&path)
            .map_err(|source| DataError::Csv { path: path.display().to_string(), source })?;
        let mut seen = HashMap::new();
        for row in rdr.records() {
            let row = row.map_err(|source| DataError::Csv { path: path.display().to_string(), source })?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| DataError::Invalid(format!("{}: bad number {s:?}", path.display())))
            };
            let id = SubjectId(
                row[0].trim().parse().map_err(|_| DataError::Invalid(format!("{}: bad subject id", path.display())))?,
            );
            let b = row.iter().skip(1).map(parse).collect::<Result<Vec<_>, _>>()?;
            if seen.insert(id, ()).is_some() {
                return Err(DataError::Invalid(format!("{}: duplicate subject {id}", path.display())));
            }
            effects.push((id, b));
        }
        effects.sort_by_key(|e| e.0);
    }
    Ok(SimulatedData { dataset, effects, config })
}
