//! Marginal log-likelihood of the joint model and its parameter gradient.

use super::params::{ParameterLayout, ParameterVector};
use super::quadrature::{QuadratureConfig, TensorGrid};
use super::spec::ResolvedModel;
use super::subject::{ParamCache, Scratch, SubjectData, SubjectEval};
use crate::dataset::Dataset;
use crate::error::ModelError;
use crate::linalg::{Vec6, MAX_RE};

/// A dataset bound to a model, ready for repeated likelihood evaluation.
pub(crate) struct LikelihoodProblem<'a> {
    pub model: &'a ResolvedModel,
    pub layout: ParameterLayout,
    pub subjects: Vec<SubjectData>,
    pub grid: TensorGrid,
}

impl<'a> LikelihoodProblem<'a> {
    pub fn new(model: &'a ResolvedModel, dataset: &Dataset, quad: &QuadratureConfig) -> Result<Self, ModelError> {
        if model.re_dim > MAX_RE {
            return Err(ModelError::DimensionCap(model.re_dim));
        }
        model.check_compatible(dataset)?;
        // Dataset subjects are sorted by id, which fixes the summation order.
        let subjects = dataset
            .subjects()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                SubjectData::new(
                    model,
                    r.subject,
                    r.observed_time,
                    r.event,
                    &r.covariates,
                    dataset.subject_observations(i),
                )
            })
            .collect();
        let q = quad.points_for_dim(model.re_dim);
        Ok(Self { model, layout: ParameterLayout::new(model), subjects, grid: TensorGrid::new(q, model.re_dim) })
    }

    /// Log-likelihood and, when `grad` is given, its gradient in the
    /// unconstrained parameterization. `modes` holds per-subject warm starts
    /// for the mode search and is updated in place.
    pub fn evaluate(
        &self,
        params: &ParameterVector,
        mut grad: Option<&mut [f64]>,
        mut modes: Option<&mut Vec<Vec6>>,
    ) -> Result<f64, ModelError> {
        let cache = ParamCache::new(self.model, params);
        let mut scratch = Scratch::default();
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        if let Some(m) = modes.as_deref_mut() {
            m.resize(self.subjects.len(), [0.0; MAX_RE]);
        }
        let mut total = 0.0;
        for (i, subj) in self.subjects.iter().enumerate() {
            let eval = SubjectEval::new(&cache, subj);
            let start = modes.as_deref().map_or([0.0; MAX_RE], |m| m[i]);
            let mode = eval.mode(&start).ok_or(ModelError::ModeSearch(subj.id))?;
            if let Some(m) = modes.as_deref_mut() {
                m[i] = mode.b;
            }
            let li = eval.integrate(&self.grid, &mode, &mut scratch);
            if !li.is_finite() {
                return Err(ModelError::ModeSearch(subj.id));
            }
            total += li;
            if let Some(g) = grad.as_deref_mut() {
                eval.accumulate_gradient(&self.layout, &mut scratch, g);
            }
        }
        Ok(total)
    }
}

/// `Σ_i log ∫ L_Y(Y_i|b) λ(T_i|b)^δ_i S(T_i|b) φ(b; 0, B) db`, with each
/// integral computed by adaptive Gauss–Hermite quadrature. Subjects are summed
/// in id order, so the result does not depend on input order.
pub fn joint_loglik(
    params: &ParameterVector,
    dataset: &Dataset,
    model: &ResolvedModel,
    quadrature: &QuadratureConfig,
) -> Result<f64, ModelError> {
    params.validate(model)?;
    LikelihoodProblem::new(model, dataset, quadrature)?.evaluate(params, None, None)
}

/// [`joint_loglik`] together with its gradient with respect to the
/// unconstrained parameter vector of [`ParameterLayout`].
pub fn joint_loglik_gradient(
    params: &ParameterVector,
    dataset: &Dataset,
    model: &ResolvedModel,
    quadrature: &QuadratureConfig,
) -> Result<(f64, Vec<f64>), ModelError> {
    params.validate(model)?;
    let problem = LikelihoodProblem::new(model, dataset, quadrature)?;
    let mut g = vec![0.0; problem.layout.len];
    let ll = problem.evaluate(params, Some(&mut g), None)?;
    Ok((ll, g))
}
