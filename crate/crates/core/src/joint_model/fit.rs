//! Maximum-likelihood estimation and the fitted-model artifact.

use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::likelihood::LikelihoodProblem;
use super::optim::{minimize, BfgsOptions};
use super::params::{packed, MarkerParams, ParameterLayout, ParameterVector};
use super::quadrature::QuadratureConfig;
use super::spec::{BaselineSpec, ModelSpec, ResolvedModel};
use crate::dataset::{Dataset, MarkerFamily};
use crate::error::{DataError, ModelError};
use crate::linalg::{Vec6, MAX_RE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub quadrature: QuadratureConfig,
    /// Convergence threshold on the max-norm of the log-likelihood gradient.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Hold the association parameters at these values instead of
    /// estimating them.
    pub fixed_association: Option<Vec<f64>>,
    /// Compute the observed-information covariance.
    pub covariance: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            quadrature: QuadratureConfig::default(),
            tolerance: 1e-3,
            max_iterations: 500,
            fixed_association: None,
            covariance: true,
        }
    }
}

/// A fitted joint model: everything needed to predict without the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedJointModel {
    pub model: ResolvedModel,
    pub estimate: ParameterVector,
    /// Estimate on the unconstrained scale.
    pub theta: Vec<f64>,
    pub parameter_names: Vec<String>,
    /// Row-major covariance of `theta`; rows of fixed parameters are zero.
    pub covariance: Vec<f64>,
    /// The negative Hessian was not positive definite and its spectrum was
    /// clipped before inversion.
    pub covariance_fallback: bool,
    pub fixed: Vec<bool>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_max_norm: f64,
    pub n_subjects: usize,
    pub n_events: usize,
}

/// One parameter on its natural scale with its delta-method standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaturalEstimate {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

impl FittedJointModel {
    /// Wrap known parameters as a fitted model (used for oracles and for
    /// prediction under fixed parameters). A missing covariance means no
    /// parameter uncertainty.
    pub fn from_parameters(
        model: ResolvedModel,
        params: ParameterVector,
        covariance: Option<Vec<f64>>,
    ) -> Result<Self, ModelError> {
        params.validate(&model)?;
        let layout = ParameterLayout::new(&model);
        let n = layout.len;
        let covariance = covariance.unwrap_or_else(|| vec![0.0; n * n]);
        if covariance.len() != n * n {
            return Err(ModelError::DimensionMismatch { expected: n * n, got: covariance.len() });
        }
        Ok(Self {
            theta: layout.pack(&params),
            parameter_names: layout.names(&model),
            model,
            estimate: params,
            covariance,
            covariance_fallback: false,
            fixed: vec![false; n],
            log_likelihood: f64::NAN,
            converged: true,
            iterations: 0,
            gradient_max_norm: 0.0,
            n_subjects: 0,
            n_events: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.model.spec
    }

    pub fn model_id(&self) -> String {
        self.model.spec.model_id()
    }

    pub fn layout(&self) -> ParameterLayout {
        ParameterLayout::new(&self.model)
    }

    /// Standard errors on the unconstrained scale.
    pub fn standard_errors(&self) -> Vec<f64> {
        let n = self.theta.len();
        (0..n).map(|i| self.covariance[i * n + i].max(0.0).sqrt()).collect()
    }

    /// Natural-scale estimates (`β`, `σ²`, `B`, `γ`, `α`, `λ0`) with standard
    /// errors from the delta method.
    pub fn natural_estimates(&self) -> Vec<NaturalEstimate> {
        let layout = self.layout();
        let n = self.theta.len();
        let base = layout.natural(&self.theta);
        let m = base.len();
        let mut jac = vec![0.0; m * n];
        let mut tp = self.theta.clone();
        for j in 0..n {
            let h = 1e-6 * self.theta[j].abs().max(1.0);
            tp[j] = self.theta[j] + h;
            let up = layout.natural(&tp);
            tp[j] = self.theta[j] - h;
            let dn = layout.natural(&tp);
            tp[j] = self.theta[j];
            for i in 0..m {
                jac[i * n + j] = (up[i] - dn[i]) / (2.0 * h);
            }
        }
        layout
            .natural_names(&self.model)
            .into_iter()
            .enumerate()
            .map(|(i, name)| {
                let mut var = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        var += jac[i * n + a] * self.covariance[a * n + b] * jac[i * n + b];
                    }
                }
                NaturalEstimate { name, estimate: base[i], std_error: var.max(0.0).sqrt() }
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fitted model serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_json() + "\n")
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|source| DataError::Json { path: path.display().to_string(), source })
    }
}

/// Optimizer state carried across stages: the bound problem, warm-start
/// modes and the free-coordinate mask.
struct Stage<'p, 'a> {
    problem: &'p LikelihoodProblem<'a>,
    modes: Vec<Vec6>,
    free: Vec<usize>,
}

impl Stage<'_, '_> {
    fn expand(&self, base: &[f64], x: &[f64]) -> Vec<f64> {
        let mut theta = base.to_vec();
        for (&i, v) in self.free.iter().zip(x) {
            theta[i] = *v;
        }
        theta
    }

    /// `ℓ` and its full gradient at `theta`, warm-starting the mode search.
    fn loglik(&mut self, theta: &[f64], grad: &mut [f64]) -> Option<f64> {
        let params = self.problem.layout.unpack(theta);
        let mut modes = self.modes.clone();
        match self.problem.evaluate(&params, Some(grad), Some(&mut modes)) {
            Ok(v) if v.is_finite() => {
                self.modes = modes;
                Some(v)
            }
            _ => None,
        }
    }

    fn run(&mut self, theta0: &[f64], opts: &FitOptions, tolerance: f64) -> Option<(Vec<f64>, f64, bool, usize, f64)> {
        let n = self.problem.layout.len;
        let base = theta0.to_vec();
        let x0: Vec<f64> = self.free.iter().map(|&i| theta0[i]).collect();
        let free = self.free.clone();
        let mut full = vec![0.0; n];
        let bfgs = BfgsOptions { tolerance, max_iterations: opts.max_iterations, max_step: 1.0 };
        let res = minimize(
            |x, g| {
                let theta = self.expand(&base, x);
                let ll = self.loglik(&theta, &mut full)?;
                for (gi, &i) in g.iter_mut().zip(&free) {
                    *gi = -full[i];
                }
                Some(-ll)
            },
            &x0,
            &bfgs,
        )?;
        let gmax = res.grad.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        Some((self.expand(&base, &res.x), -res.f, res.converged, res.iterations, gmax))
    }
}

/// Least-squares start for the fixed effects of one marker and its residual
/// variance.
fn ols_start(model: &ResolvedModel, k: usize, dataset: &Dataset) -> (Vec<f64>, f64) {
    let m = &model.markers[k];
    let p = m.n_fixed();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    let mut ys = Vec::new();
    for (i, rec) in dataset.subjects().iter().enumerate() {
        for o in dataset.subject_observations(i).iter().filter(|o| o.marker == m.index) {
            m.fixed_row(&rec.covariates, o.time, &mut row);
            for a in 0..p {
                for b in 0..p {
                    xtx[(a, b)] += row[a] * row[b];
                }
                xty[a] += row[a] * o.value;
            }
            ys.push((row.clone(), o.value));
        }
    }
    if m.family == MarkerFamily::Binary {
        let mean = if ys.is_empty() { 0.5 } else { ys.iter().map(|(_, y)| y).sum::<f64>() / ys.len() as f64 };
        let mean = mean.clamp(0.02, 0.98);
        let mut beta = vec![0.0; p];
        if let Some(i) = m.fixed.iter().position(|t| matches!(t, super::spec::ResolvedTerm::Intercept)) {
            beta[i] = (mean / (1.0 - mean)).ln();
        }
        return (beta, 1.0);
    }
    for a in 0..p {
        xtx[(a, a)] += 1e-8;
    }
    let beta = xtx.cholesky().map(|c| c.solve(&xty)).unwrap_or_else(|| DVector::zeros(p));
    let rss: f64 = ys
        .iter()
        .map(|(w, y)| {
            let r = y - w.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>();
            r * r
        })
        .sum();
    let var = if ys.len() > p { rss / (ys.len() - p) as f64 } else { 1.0 };
    (beta.iter().copied().collect(), var.max(1e-4))
}

/// Events over exposure on each baseline piece.
fn baseline_start(model: &ResolvedModel, dataset: &Dataset) -> Vec<f64> {
    let j = model.n_pieces();
    let mut events = vec![0.0; j];
    let mut exposure = vec![0.0; j];
    for r in dataset.subjects() {
        let mut lower = 0.0;
        for (p, &k) in model.knots.iter().enumerate() {
            let upper = if p == j - 1 { r.observed_time } else { k.min(r.observed_time) };
            if upper > lower {
                exposure[p] += upper - lower;
            }
            lower = k;
        }
        if r.event {
            events[super::hazard::piece_index(&model.knots, r.observed_time)] += 1.0;
        }
    }
    let total = events.iter().sum::<f64>().max(0.5) / exposure.iter().sum::<f64>().max(1e-12);
    events.iter().zip(&exposure).map(|(e, x)| if *x > 0.0 { (e + 0.5) / (x + 0.5 / total) } else { total }).collect()
}

fn initial_parameters(model: &ResolvedModel, dataset: &Dataset, alpha: &[f64]) -> ParameterVector {
    let d = model.re_dim;
    let mut cov = vec![0.0; d * d];
    let markers = (0..model.markers.len())
        .map(|k| {
            let (beta, var) = ols_start(model, k, dataset);
            let m = &model.markers[k];
            let gaussian = m.family == MarkerFamily::Gaussian;
            for (j, t) in m.random.iter().enumerate() {
                let i = m.re_offset + j;
                let scale = if gaussian { 0.5 * var } else { 1.0 };
                cov[i * d + i] = if matches!(t, super::spec::ResolvedTerm::Time) { 0.5 * scale } else { scale };
            }
            MarkerParams { beta, variance: gaussian.then_some(0.5 * var) }
        })
        .collect();
    ParameterVector::with_covariance(
        markers,
        &cov,
        vec![0.0; model.survival_covariates.len()],
        alpha.to_vec(),
        baseline_start(model, dataset),
    )
    .expect("diagonal start covariance is positive definite")
}

/// Shrink the random-effect scale and the baseline until the likelihood is
/// finite at the start.
fn finite_start(problem: &LikelihoodProblem, theta: &mut [f64]) -> Result<(), ModelError> {
    let layout = &problem.layout;
    for attempt in 0..=10 {
        if let Ok(v) = problem.evaluate(&layout.unpack(theta), None, None) {
            if v.is_finite() {
                return Ok(());
            }
        }
        if attempt == 10 {
            break;
        }
        debug!("non-finite likelihood at start, rescaling ({})", attempt + 1);
        for i in 0..layout.re_dim {
            theta[layout.cholesky.start + packed(i, i)] -= std::f64::consts::LN_2;
        }
        for j in layout.log_baseline.clone() {
            theta[j] -= std::f64::consts::LN_2;
        }
        for a in layout.alpha.clone() {
            theta[a] *= 0.5;
        }
    }
    Err(ModelError::Initialization(10))
}

/// Central-difference Hessian of `ℓ` over the free coordinates from the
/// analytic gradient; returns the covariance `(−H)⁻¹` embedded in the full
/// parameter space and whether the spectrum had to be clipped.
fn observed_covariance(stage: &mut Stage, theta: &[f64]) -> Option<(Vec<f64>, bool)> {
    let n = stage.problem.layout.len;
    let f = stage.free.len();
    let mut hess = DMatrix::<f64>::zeros(f, f);
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    let modes = stage.modes.clone();
    for (c, &i) in stage.free.clone().iter().enumerate() {
        let h = 1e-4 * theta[i].abs().max(1.0);
        let mut tp = theta.to_vec();
        tp[i] += h;
        stage.modes = modes.clone();
        stage.loglik(&tp, &mut gp)?;
        tp[i] = theta[i] - h;
        stage.modes = modes.clone();
        stage.loglik(&tp, &mut gm)?;
        for (r, &j) in stage.free.iter().enumerate() {
            hess[(r, c)] = (gp[j] - gm[j]) / (2.0 * h);
        }
    }
    stage.modes = modes;
    let info = -(&hess + hess.transpose()) * 0.5;
    let (inv, fallback) = match info.clone().cholesky() {
        Some(ch) => (ch.inverse(), false),
        None => {
            let eig = info.symmetric_eigen();
            let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(*v)).max(1e-12);
            let clipped = eig.eigenvalues.map(|v| 1.0 / v.max(1e-8 * top));
            (&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose(), true)
        }
    };
    let mut cov = vec![0.0; n * n];
    for (r, &i) in stage.free.iter().enumerate() {
        for (c, &j) in stage.free.iter().enumerate() {
            cov[i * n + j] = inv[(r, c)];
        }
    }
    Some((cov, fallback))
}

/// Fit a joint model by maximum likelihood.
///
/// Each marker's mixed sub-model is first fitted on its own with the
/// association held at zero; those estimates (block-diagonal `B`) start the
/// joint maximization.
pub fn fit(dataset: &Dataset, spec: &ModelSpec, options: &FitOptions) -> Result<FittedJointModel, ModelError> {
    if dataset.n_events() == 0 {
        return Err(ModelError::NoEvents);
    }
    let model = spec.resolve(dataset)?;
    if let Some(a) = &options.fixed_association {
        if a.len() != model.markers.len() {
            return Err(ModelError::DimensionMismatch { expected: model.markers.len(), got: a.len() });
        }
    }
    let problem = LikelihoodProblem::new(&model, dataset, &options.quadrature)?;
    let layout = &problem.layout;
    let alpha0 = options.fixed_association.clone().unwrap_or_else(|| vec![0.0; model.markers.len()]);
    let mut start = initial_parameters(&model, dataset, &alpha0);

    // Separate longitudinal fits when the association is free and there is
    // more than one thing to separate.
    if options.fixed_association.is_none() {
        let mut cov = vec![0.0; model.re_dim * model.re_dim];
        for (k, ms) in spec.markers.iter().enumerate() {
            let sub = ModelSpec {
                markers: vec![ms.clone()],
                survival_covariates: spec.survival_covariates.clone(),
                association: spec.association,
                baseline: BaselineSpec { knot_count: model.n_pieces(), knots: Some(model.knots.clone()) },
            };
            let sub_opts = FitOptions {
                tolerance: options.tolerance.max(1e-2),
                fixed_association: Some(vec![0.0]),
                covariance: false,
                ..options.clone()
            };
            let sf = fit(dataset, &sub, &sub_opts)?;
            start.markers[k] = sf.estimate.markers[0].clone();
            let q = ms.random.len();
            let b = sf.estimate.re_covariance();
            let off = model.markers[k].re_offset;
            for i in 0..q {
                for j in 0..q {
                    cov[(off + i) * model.re_dim + off + j] = b[i * q + j];
                }
            }
            if k == 0 {
                start.gamma = sf.estimate.gamma.clone();
                start.baseline = sf.estimate.baseline.clone();
            }
        }
        if model.re_dim > 0 {
            start = ParameterVector::with_covariance(start.markers, &cov, start.gamma, start.alpha, start.baseline)?;
        }
    }

    let mut theta0 = layout.pack(&start);
    finite_start(&problem, &mut theta0)?;
    let fixed: Vec<bool> =
        (0..layout.len).map(|i| options.fixed_association.is_some() && layout.alpha.contains(&i)).collect();
    let free: Vec<usize> = (0..layout.len).filter(|&i| !fixed[i]).collect();
    let mut stage = Stage { problem: &problem, modes: vec![[0.0; MAX_RE]; problem.subjects.len()], free };
    let (theta, ll, converged, iterations, gmax) =
        stage.run(&theta0, options, options.tolerance).ok_or(ModelError::Initialization(10))?;
    if !converged {
        warn!("{}: optimizer stopped with gradient max-norm {gmax:.3e}", spec.model_id());
    }
    let n = layout.len;
    let (covariance, covariance_fallback) = if options.covariance {
        observed_covariance(&mut stage, &theta).unwrap_or((vec![0.0; n * n], true))
    } else {
        (vec![0.0; n * n], false)
    };
    Ok(FittedJointModel {
        estimate: layout.unpack(&theta),
        parameter_names: layout.names(&model),
        theta,
        covariance,
        covariance_fallback,
        fixed,
        log_likelihood: ll,
        converged,
        iterations,
        gradient_max_norm: gmax,
        n_subjects: dataset.n_subjects(),
        n_events: dataset.n_events(),
        model,
    })
}
