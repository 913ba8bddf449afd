//! Individual dynamic predictions
//! `π_i(s,t) = P(T_i ≤ s+t | T_i > s, marker history up to s)`.
//!
//! Parameter uncertainty enters through draws from the asymptotic normal
//! distribution of the maximum-likelihood estimate. For each parameter draw
//! the subject's random effects are drawn from their conditional
//! distribution given survival to `s` and the observed history, using an
//! independence Metropolis–Hastings chain with a multivariate t proposal
//! centred at the mode and scaled by the inverse curvature.

use log::debug;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{SubjectHistory, SubjectId};
use crate::error::ModelError;
use crate::joint_model::subject::{Mode, ParamCache, SubjectData, SubjectEval};
use crate::joint_model::{hazard_line, interval_cumhaz, FittedJointModel, ParameterVector, ResolvedModel};
use crate::linalg::{back_sub_t, Vec6, MAX_RE};
use crate::seeds::{derive_seed, real_tag, rng_from};

const PROPOSAL_DF: f64 = 4.0;
/// Proposal spread relative to the Laplace approximation of the posterior.
const PROPOSAL_SCALE: f64 = 1.5;
const DRAW_TAG: u64 = 0x6472_6177;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictOptions {
    /// Number of Monte Carlo draws `M`.
    pub mc_draws: usize,
    /// Metropolis–Hastings steps per random-effect draw.
    pub mh_steps: usize,
    pub seed: u64,
    /// Refuse models whose optimizer did not converge.
    pub require_converged: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self { mc_draws: 500, mh_steps: 200, seed: 0, require_converged: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionQuery {
    pub landmark: f64,
    pub window: f64,
    pub mc_draws: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskPrediction {
    pub subject: SubjectId,
    pub landmark: f64,
    pub window: f64,
    pub point: f64,
    /// Standard deviation of the draw-level probabilities over `√M`.
    pub mc_se: f64,
    pub draw_mean: f64,
    pub draw_variance: f64,
    pub acceptance_rate: f64,
}

/// Parameter draws on the natural scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterDraws {
    pub draws: Vec<ParameterVector>,
    /// The covariance was not positive semi-definite and only its diagonal
    /// was used.
    pub diagonal_fallback: bool,
}

/// `m` draws from `N(θ̂, Σ̂)` on the unconstrained scale, mapped back.
pub fn draw_parameters(fitted: &FittedJointModel, m: usize, seed: u64) -> Result<ParameterDraws, ModelError> {
    if !fitted.converged {
        return Err(ModelError::NotConverged);
    }
    Ok(draw_unchecked(fitted, m, seed))
}

fn draw_unchecked(fitted: &FittedJointModel, m: usize, seed: u64) -> ParameterDraws {
    let n = fitted.theta.len();
    let cov = DMatrix::from_row_slice(n, n, &fitted.covariance);
    let sym = (&cov + cov.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(*v));
    let diagonal_fallback = min < -1e-10 * top.max(1e-300) && top > 0.0;
    // Factor A with A A' = Σ.
    let factor = if diagonal_fallback {
        DMatrix::from_diagonal(&sym.diagonal().map(|v| v.max(0.0).sqrt()))
    } else {
        &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()))
    };
    let layout = fitted.layout();
    let mut rng = rng_from(derive_seed(seed, &[DRAW_TAG]));
    let draws = (0..m)
        .map(|_| {
            let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let theta: Vec<f64> =
                (0..n).map(|i| fitted.theta[i] + (0..n).map(|j| factor[(i, j)] * z[j]).sum::<f64>()).collect();
            layout.unpack(&theta)
        })
        .collect();
    ParameterDraws { draws, diagonal_fallback }
}

/// `S(s+t | b) / S(s | b)`.
pub fn conditional_survival_ratio(
    model: &ResolvedModel,
    params: &ParameterVector,
    b: &[f64],
    covariates: &[f64],
    s: f64,
    t: f64,
) -> Result<f64, ModelError> {
    if b.len() != model.re_dim {
        return Err(ModelError::DimensionMismatch { expected: model.re_dim, got: b.len() });
    }
    let (a, c) = hazard_line(model, params, b, covariates);
    Ok((-interval_cumhaz(&model.knots, &params.baseline, a, c, s, s + t)).exp())
}

fn subject_data(model: &ResolvedModel, history: &SubjectHistory) -> SubjectData {
    SubjectData::new(model, history.subject, history.landmark, false, &history.covariates, &history.observations)
}

/// Log density of the t proposal up to a constant, from `u = L'(b − b̂)`.
#[inline]
fn log_t(u2: f64, d: usize) -> f64 {
    -0.5 * (PROPOSAL_DF + d as f64) * (1.0 + u2 / PROPOSAL_DF).ln()
}

/// Independence Metropolis–Hastings chain started at the mode; returns the
/// final state and the number of accepted moves.
fn mh_chain<R: Rng>(eval: &SubjectEval, mode: &Mode, d: usize, steps: usize, rng: &mut R) -> (Vec6, usize) {
    let chi = ChiSquared::new(PROPOSAL_DF).expect("positive degrees of freedom");
    let mut cur = mode.b;
    let mut cur_h = eval.value(&cur);
    let mut cur_q = log_t(0.0, d);
    let mut accepted = 0;
    for _ in 0..steps {
        let mut z = [0.0; MAX_RE];
        for zi in z.iter_mut().take(d) {
            *zi = rng.sample(StandardNormal);
        }
        let scale = (PROPOSAL_DF / chi.sample(rng)).sqrt();
        let mut u2 = 0.0;
        for zi in z.iter_mut().take(d) {
            *zi *= scale;
            u2 += *zi * *zi;
        }
        let mut zs = z;
        zs.iter_mut().take(d).for_each(|v| *v *= PROPOSAL_SCALE);
        let off = back_sub_t(&mode.chol, d, &zs);
        let mut prop = mode.b;
        for i in 0..d {
            prop[i] += off[i];
        }
        let prop_h = eval.value(&prop);
        let prop_q = log_t(u2, d);
        let log_ratio = prop_h - cur_h + cur_q - prop_q;
        let u: f64 = rng.random();
        if prop_h.is_finite() && u.ln() < log_ratio {
            cur = prop;
            cur_h = prop_h;
            cur_q = prop_q;
            accepted += 1;
        }
    }
    (cur, accepted)
}

/// One draw from the conditional distribution of the random effects given
/// survival to the landmark and the observed history.
pub fn sample_random_effects(
    model: &ResolvedModel,
    params: &ParameterVector,
    history: &SubjectHistory,
    n_mh: usize,
    seed: u64,
) -> Result<Vec<f64>, ModelError> {
    params.validate(model)?;
    let subj = subject_data(model, history);
    let cache = ParamCache::new(model, params);
    let eval = SubjectEval::new(&cache, &subj);
    let mode = eval.mode(&[0.0; MAX_RE]).ok_or(ModelError::ModeSearch(history.subject))?;
    let mut rng = rng_from(seed);
    let (b, _) = mh_chain(&eval, &mode, model.re_dim, n_mh, &mut rng);
    Ok(b[..model.re_dim].to_vec())
}

/// A fitted model with its parameter draws, reused across subjects and
/// landmarks.
pub struct Predictor<'a> {
    fitted: &'a FittedJointModel,
    draws: ParameterDraws,
    options: PredictOptions,
}

impl<'a> Predictor<'a> {
    pub fn new(fitted: &'a FittedJointModel, options: &PredictOptions) -> Result<Self, ModelError> {
        if options.mc_draws == 0 {
            return Err(ModelError::InvalidSpec("at least one Monte Carlo draw is required".into()));
        }
        let draws = if options.require_converged {
            draw_parameters(fitted, options.mc_draws, options.seed)?
        } else {
            draw_unchecked(fitted, options.mc_draws, options.seed)
        };
        if draws.diagonal_fallback {
            log::warn!("{}: covariance not positive semi-definite, drawing from its diagonal", fitted.model_id());
        }
        Ok(Self { fitted, draws, options: *options })
    }

    pub fn diagonal_fallback(&self) -> bool {
        self.draws.diagonal_fallback
    }

    pub fn predict(&self, history: &SubjectHistory, window: f64) -> Result<RiskPrediction, ModelError> {
        Ok(self.predict_windows(history, &[window])?.remove(0))
    }

    /// Predictions for several windows from the same draws, so they are
    /// nondecreasing in the window length.
    pub fn predict_windows(
        &self,
        history: &SubjectHistory,
        windows: &[f64],
    ) -> Result<Vec<RiskPrediction>, ModelError> {
        let model = &self.fitted.model;
        let s = history.landmark;
        if windows.iter().any(|t| !(*t >= 0.0)) || !(s >= 0.0) {
            return Err(ModelError::InvalidSpec("landmark and window must be nonnegative".into()));
        }
        let subj = subject_data(model, history);
        // The stream depends on the subject and landmark only, never on the
        // window, so a grid of windows shares its draws.
        let mut rng = rng_from(derive_seed(self.options.seed, &[history.subject.0, real_tag(s)]));
        let d = model.re_dim;
        let m = self.draws.draws.len();
        let mut probs = vec![Vec::with_capacity(m); windows.len()];
        let mut warm: Vec6 = [0.0; MAX_RE];
        let mut accepted = 0;
        for params in &self.draws.draws {
            let cache = ParamCache::new(model, params);
            let eval = SubjectEval::new(&cache, &subj);
            let mode = eval
                .mode(&warm)
                .or_else(|| eval.mode(&[0.0; MAX_RE]))
                .ok_or(ModelError::ModeSearch(history.subject))?;
            warm = mode.b;
            let (b, acc) = mh_chain(&eval, &mode, d, self.options.mh_steps, &mut rng);
            accepted += acc;
            let (a, c) = hazard_line(model, params, &b[..d], &history.covariates);
            for (w, out) in windows.iter().zip(probs.iter_mut()) {
                out.push(-(-interval_cumhaz(&model.knots, &params.baseline, a, c, s, s + w)).exp_m1());
            }
        }
        let acceptance_rate =
            if self.options.mh_steps > 0 { accepted as f64 / (m * self.options.mh_steps) as f64 } else { 1.0 };
        if self.options.mh_steps > 0 && d > 0 && !(0.1..0.9).contains(&acceptance_rate) {
            debug!("subject {}: MH acceptance rate {acceptance_rate:.3} outside (0.1, 0.9)", history.subject);
        }
        Ok(windows
            .iter()
            .zip(probs)
            .map(|(&w, p)| {
                let mean = p.iter().sum::<f64>() / m as f64;
                let var = if m > 1 { p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64 } else { 0.0 };
                RiskPrediction {
                    subject: history.subject,
                    landmark: s,
                    window: w,
                    point: mean.clamp(0.0, 1.0),
                    mc_se: (var / m as f64).sqrt(),
                    draw_mean: mean,
                    draw_variance: var,
                    acceptance_rate,
                }
            })
            .collect())
    }
}

/// `π̂ = 1 − (1/M) Σ_m S(s+t | b⁽ᵐ⁾, ξ⁽ᵐ⁾) / S(s | b⁽ᵐ⁾, ξ⁽ᵐ⁾)`.
pub fn predict_risk(
    fitted: &FittedJointModel,
    history: &SubjectHistory,
    query: &PredictionQuery,
) -> Result<RiskPrediction, ModelError> {
    if (query.landmark - history.landmark).abs() > 0.0 {
        return Err(ModelError::InvalidSpec(format!(
            "history truncated at {} but query landmark is {}",
            history.landmark, query.landmark
        )));
    }
    let options = PredictOptions { mc_draws: query.mc_draws, seed: query.seed, ..PredictOptions::default() };
    Predictor::new(fitted, &options)?.predict(history, query.window)
}
