//! Natural-scale parameter vector and its unconstrained packing.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::spec::{ResolvedModel, ResolvedTerm};
use crate::error::ModelError;
use crate::linalg::{at, cholesky, Mat6, MAX_RE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerParams {
    pub beta: Vec<f64>,
    /// Residual variance `σ²`; `None` for binary markers.
    pub variance: Option<f64>,
}

/// Parameters `ξ` of a joint model on their natural scale.
///
/// The random-effect covariance is stored through its lower Cholesky factor,
/// packed row by row: `L00, L10, L11, L20, ...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub markers: Vec<MarkerParams>,
    pub re_cholesky: Vec<f64>,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub baseline: Vec<f64>,
}

#[inline]
pub(crate) fn packed(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl ParameterVector {
    /// Build from a dense row-major covariance of dimension `d`.
    pub fn with_covariance(
        markers: Vec<MarkerParams>,
        covariance: &[f64],
        gamma: Vec<f64>,
        alpha: Vec<f64>,
        baseline: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let d = (covariance.len() as f64).sqrt().round() as usize;
        if d * d != covariance.len() || d > MAX_RE {
            return Err(ModelError::InvalidParameters(format!(
                "covariance of length {} is not a square matrix of dimension <= {MAX_RE}",
                covariance.len()
            )));
        }
        let mut m: Mat6 = [0.0; MAX_RE * MAX_RE];
        for i in 0..d {
            for j in 0..d {
                m[at(i, j)] = covariance[i * d + j];
            }
        }
        let l = cholesky(&m, d)
            .ok_or_else(|| ModelError::InvalidParameters("random-effect covariance is not positive definite".into()))?;
        let mut re_cholesky = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in 0..=i {
                re_cholesky.push(l[at(i, j)]);
            }
        }
        Ok(Self { markers, re_cholesky, gamma, alpha, baseline })
    }

    pub fn re_dim(&self) -> usize {
        let n = self.re_cholesky.len();
        ((((8 * n + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize
    }

    pub(crate) fn cholesky_mat(&self) -> Mat6 {
        let d = self.re_dim();
        let mut l = [0.0; MAX_RE * MAX_RE];
        for i in 0..d {
            for j in 0..=i {
                l[at(i, j)] = self.re_cholesky[packed(i, j)];
            }
        }
        l
    }

    /// Dense row-major random-effect covariance `B = L L'`.
    pub fn re_covariance(&self) -> Vec<f64> {
        let d = self.re_dim();
        let l = self.cholesky_mat();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..=i.min(j)).map(|k| l[at(i, k)] * l[at(j, k)]).sum();
            }
        }
        out
    }

    /// Check dimensions against the model and the positivity constraints.
    pub fn validate(&self, model: &ResolvedModel) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidParameters(m));
        if self.markers.len() != model.markers.len() {
            return bad(format!("expected {} marker blocks, got {}", model.markers.len(), self.markers.len()));
        }
        for (mp, m) in self.markers.iter().zip(&model.markers) {
            if mp.beta.len() != m.n_fixed() {
                return bad(format!("marker {} expects {} fixed effects", m.index + 1, m.n_fixed()));
            }
            match (m.family.has_dispersion(), mp.variance) {
                (true, Some(v)) if v > 0.0 && v.is_finite() => {}
                (false, None) => {}
                _ => return bad(format!("marker {} has an invalid dispersion", m.index + 1)),
            }
            if mp.beta.iter().any(|b| !b.is_finite()) {
                return bad("non-finite fixed effect".into());
            }
        }
        let d = model.re_dim;
        if self.re_cholesky.len() != d * (d + 1) / 2 {
            return Err(ModelError::DimensionMismatch { expected: d * (d + 1) / 2, got: self.re_cholesky.len() });
        }
        if self.re_cholesky.iter().any(|v| !v.is_finite()) || (0..d).any(|i| self.re_cholesky[packed(i, i)] <= 0.0) {
            return bad("random-effect Cholesky factor must have a positive diagonal".into());
        }
        if self.gamma.len() != model.survival_covariates.len() {
            return Err(ModelError::DimensionMismatch {
                expected: model.survival_covariates.len(),
                got: self.gamma.len(),
            });
        }
        if self.alpha.len() != model.markers.len() {
            return Err(ModelError::DimensionMismatch { expected: model.markers.len(), got: self.alpha.len() });
        }
        if self.baseline.len() != model.n_pieces() {
            return Err(ModelError::DimensionMismatch { expected: model.n_pieces(), got: self.baseline.len() });
        }
        if self.baseline.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return bad("baseline hazard values must be positive".into());
        }
        if self.gamma.iter().chain(&self.alpha).any(|v| !v.is_finite()) {
            return bad("non-finite survival coefficient".into());
        }
        Ok(())
    }
}

/// Positions of each parameter block in the unconstrained vector `θ`:
/// per marker `β_k` then `log σ²_k`; the packed Cholesky factor of `B` with
/// log diagonal; `γ`; `α`; `log λ0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterLayout {
    pub beta: Vec<Range<usize>>,
    pub log_variance: Vec<Option<usize>>,
    pub cholesky: Range<usize>,
    pub gamma: Range<usize>,
    pub alpha: Range<usize>,
    pub log_baseline: Range<usize>,
    pub re_dim: usize,
    pub len: usize,
}

impl ParameterLayout {
    pub fn new(model: &ResolvedModel) -> Self {
        let mut pos = 0;
        let mut take = |n: usize| {
            let r = pos..pos + n;
            pos += n;
            r
        };
        let mut beta = Vec::new();
        let mut log_variance = Vec::new();
        for m in &model.markers {
            beta.push(take(m.n_fixed()));
            log_variance.push(m.family.has_dispersion().then(|| take(1).start));
        }
        let d = model.re_dim;
        let cholesky = take(d * (d + 1) / 2);
        let gamma = take(model.survival_covariates.len());
        let alpha = take(model.markers.len());
        let log_baseline = take(model.n_pieces());
        Self { beta, log_variance, cholesky, gamma, alpha, log_baseline, re_dim: d, len: pos }
    }

    pub fn pack(&self, p: &ParameterVector) -> Vec<f64> {
        let mut theta = vec![0.0; self.len];
        for (k, mp) in p.markers.iter().enumerate() {
            theta[self.beta[k].clone()].copy_from_slice(&mp.beta);
            if let (Some(i), Some(v)) = (self.log_variance[k], mp.variance) {
                theta[i] = v.ln();
            }
        }
        for i in 0..self.re_dim {
            for j in 0..=i {
                let v = p.re_cholesky[packed(i, j)];
                theta[self.cholesky.start + packed(i, j)] = if i == j { v.ln() } else { v };
            }
        }
        theta[self.gamma.clone()].copy_from_slice(&p.gamma);
        theta[self.alpha.clone()].copy_from_slice(&p.alpha);
        for (t, l) in theta[self.log_baseline.clone()].iter_mut().zip(&p.baseline) {
            *t = l.ln();
        }
        theta
    }

    pub fn unpack(&self, theta: &[f64]) -> ParameterVector {
        let markers = self
            .beta
            .iter()
            .zip(&self.log_variance)
            .map(|(r, v)| MarkerParams { beta: theta[r.clone()].to_vec(), variance: v.map(|i| theta[i].exp()) })
            .collect();
        let mut re_cholesky = theta[self.cholesky.clone()].to_vec();
        for i in 0..self.re_dim {
            re_cholesky[packed(i, i)] = re_cholesky[packed(i, i)].exp();
        }
        ParameterVector {
            markers,
            re_cholesky,
            gamma: theta[self.gamma.clone()].to_vec(),
            alpha: theta[self.alpha.clone()].to_vec(),
            baseline: theta[self.log_baseline.clone()].iter().map(|v| v.exp()).collect(),
        }
    }

    /// Labels of the unconstrained coordinates.
    pub fn names(&self, model: &ResolvedModel) -> Vec<String> {
        let mut out = vec![String::new(); self.len];
        for (k, m) in model.markers.iter().enumerate() {
            let id = m.index + 1;
            for (i, term) in m.fixed.iter().enumerate() {
                out[self.beta[k].start + i] = format!("beta[{id}].{}", term_label(model, term));
            }
            if let Some(i) = self.log_variance[k] {
                out[i] = format!("log_sigma2[{id}]");
            }
        }
        for i in 0..self.re_dim {
            for j in 0..=i {
                out[self.cholesky.start + packed(i, j)] =
                    if i == j { format!("log_chol[{i},{i}]") } else { format!("chol[{i},{j}]") };
            }
        }
        for (g, &c) in self.gamma.clone().zip(&model.survival_covariates) {
            out[g] = format!("gamma.{}", model.covariate_names[c]);
        }
        for (a, m) in self.alpha.clone().zip(&model.markers) {
            out[a] = format!("alpha[{}]", m.index + 1);
        }
        for (j, l) in self.log_baseline.clone().enumerate() {
            out[l] = format!("log_lambda0[{}]", j + 1);
        }
        out
    }

    /// Natural-scale transform used for reporting: `β`, `σ²`, the lower
    /// triangle of `B`, `γ`, `α`, `λ0`.
    pub fn natural(&self, theta: &[f64]) -> Vec<f64> {
        let p = self.unpack(theta);
        let mut out = Vec::with_capacity(self.len);
        for mp in &p.markers {
            out.extend_from_slice(&mp.beta);
            out.extend(mp.variance);
        }
        let d = self.re_dim;
        let b = p.re_covariance();
        for i in 0..d {
            for j in 0..=i {
                out.push(b[i * d + j]);
            }
        }
        out.extend_from_slice(&p.gamma);
        out.extend_from_slice(&p.alpha);
        out.extend_from_slice(&p.baseline);
        out
    }

    pub fn natural_names(&self, model: &ResolvedModel) -> Vec<String> {
        let names = self.names(model);
        let mut out = Vec::with_capacity(self.len);
        for k in 0..self.beta.len() {
            out.extend(names[self.beta[k].clone()].iter().cloned());
            if let Some(i) = self.log_variance[k] {
                out.push(names[i].replacen("log_", "", 1));
            }
        }
        for i in 0..self.re_dim {
            for j in 0..=i {
                out.push(format!("B[{i},{j}]"));
            }
        }
        out.extend(names[self.gamma.clone()].iter().cloned());
        out.extend(names[self.alpha.clone()].iter().cloned());
        out.extend(names[self.log_baseline.clone()].iter().map(|n| n.replacen("log_", "", 1)));
        out
    }
}

fn term_label(model: &ResolvedModel, term: &ResolvedTerm) -> String {
    match term {
        ResolvedTerm::Intercept => "intercept".into(),
        ResolvedTerm::Time => "time".into(),
        ResolvedTerm::Covariate(i) => model.covariate_names[*i].clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::MarkerFamily;
    use crate::joint_model::spec::ModelSpec;

    fn model() -> ResolvedModel {
        let fam = vec![("g".to_string(), MarkerFamily::Gaussian), ("b".to_string(), MarkerFamily::Binary)];
        ResolvedModel::build(ModelSpec::linear(&[1, 2], 3), &fam, &[], vec![1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let m = model();
        let lay = ParameterLayout::new(&m);
        assert_eq!(lay.len, 2 + 1 + 2 + 10 + 2 + 3);
        let mut cov = vec![0.0; 16];
        for i in 0..4 {
            cov[i * 4 + i] = 1.0 + i as f64;
        }
        cov[1] = 0.3;
        cov[4] = 0.3;
        let p = ParameterVector::with_covariance(
            vec![
                MarkerParams { beta: vec![0.1, -1.0], variance: Some(0.5) },
                MarkerParams { beta: vec![0.2, -0.5], variance: None },
            ],
            &cov,
            vec![],
            vec![-0.5, 0.3],
            vec![0.1, 0.2, 0.3],
        )
        .unwrap();
        p.validate(&m).unwrap();
        let theta = lay.pack(&p);
        let q = lay.unpack(&theta);
        for (a, b) in p.re_covariance().iter().zip(q.re_covariance()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((q.markers[0].variance.unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(lay.names(&m).len(), lay.len);
        assert_eq!(lay.natural(&theta).len(), lay.natural_names(&m).len());
        assert_eq!(lay.natural_names(&m)[2], "sigma2[1]");
    }
}
