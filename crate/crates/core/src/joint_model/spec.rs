//! Declarative model definitions and their resolution against a dataset.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, MarkerFamily};
use crate::error::ModelError;
use crate::linalg::MAX_RE;

/// A design column of the mixed sub-model. Covariates refer to baseline
/// covariates by name; they are constant over time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Intercept,
    Time,
    Covariate(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerSpec {
    /// 1-based marker id, as in `longitudinal.csv`.
    pub marker_id: usize,
    pub fixed: Vec<Term>,
    pub random: Vec<Term>,
}

impl MarkerSpec {
    /// Linear time trend with random intercept and slope.
    pub fn linear(marker_id: usize) -> Self {
        Self { marker_id, fixed: vec![Term::Intercept, Term::Time], random: vec![Term::Intercept, Term::Time] }
    }
}

/// How the marker enters the hazard. Only the current value `m_ik(t)` is
/// supported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Association {
    #[default]
    CurrentValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    /// Number of constant pieces.
    pub knot_count: usize,
    /// Explicit right endpoints of the pieces. When absent they are placed at
    /// event-time quantiles, the last one at the largest observed time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<Vec<f64>>,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self { knot_count: 5, knots: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub markers: Vec<MarkerSpec>,
    #[serde(default)]
    pub survival_covariates: Vec<String>,
    #[serde(default)]
    pub association: Association,
    #[serde(default)]
    pub baseline: BaselineSpec,
}

impl ModelSpec {
    /// Linear-trend, random intercept and slope model for the given markers.
    pub fn linear(marker_ids: &[usize], knot_count: usize) -> Self {
        Self {
            markers: marker_ids.iter().map(|&k| MarkerSpec::linear(k)).collect(),
            survival_covariates: vec![],
            association: Association::CurrentValue,
            baseline: BaselineSpec { knot_count, knots: None },
        }
    }

    pub fn random_effect_dim(&self) -> usize {
        self.markers.iter().map(|m| m.random.len()).sum()
    }

    /// Identifier such as `jm[1+3]`, built from the marker ids.
    pub fn model_id(&self) -> String {
        let ids: Vec<String> = self.markers.iter().map(|m| m.marker_id.to_string()).collect();
        format!("jm[{}]", ids.join("+"))
    }

    pub fn resolve(&self, dataset: &Dataset) -> Result<ResolvedModel, ModelError> {
        let knots = match &self.baseline.knots {
            Some(k) => k.clone(),
            None => quantile_knots(dataset, self.baseline.knot_count)?,
        };
        let families: Vec<(String, MarkerFamily)> =
            dataset.markers().iter().map(|m| (m.name.clone(), m.family)).collect();
        ResolvedModel::build(self.clone(), &families, dataset.covariate_names(), knots)
    }
}

/// Knots at event-time quantiles `j/J`, closed by the largest observed time.
pub fn quantile_knots(dataset: &Dataset, count: usize) -> Result<Vec<f64>, ModelError> {
    if count == 0 {
        return Err(ModelError::InvalidSpec("knot count must be >= 1".into()));
    }
    let max_t = dataset.subjects().iter().map(|r| r.observed_time).fold(0.0_f64, f64::max);
    let mut events: Vec<f64> = dataset.subjects().iter().filter(|r| r.event).map(|r| r.observed_time).collect();
    events.sort_by(f64::total_cmp);
    let mut knots = Vec::with_capacity(count);
    if !events.is_empty() {
        for j in 1..count {
            let pos = j as f64 / count as f64 * (events.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let q = events[lo] + (pos - lo as f64) * (events[hi] - events[lo]);
            if q > 0.0 && knots.last().is_none_or(|&l| q > l) && q < max_t {
                knots.push(q);
            }
        }
    }
    knots.push(max_t);
    Ok(knots)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolvedTerm {
    Intercept,
    Time,
    Covariate(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedMarker {
    /// Zero-based index into the dataset's marker table.
    pub index: usize,
    pub name: String,
    pub family: MarkerFamily,
    pub fixed: Vec<ResolvedTerm>,
    pub random: Vec<ResolvedTerm>,
    /// Position of this marker's first random effect in the stacked vector.
    pub re_offset: usize,
    pub re_intercept: Option<usize>,
    pub re_time: Option<usize>,
}

impl ResolvedMarker {
    pub fn n_fixed(&self) -> usize {
        self.fixed.len()
    }

    pub fn n_random(&self) -> usize {
        self.random.len()
    }

    /// Fixed-effect design row at time `t`.
    pub fn fixed_row(&self, covariates: &[f64], t: f64, out: &mut [f64]) {
        for (o, term) in out.iter_mut().zip(&self.fixed) {
            *o = term_value(term, covariates, t);
        }
    }

    pub fn random_row(&self, t: f64, out: &mut [f64]) {
        for (o, term) in out.iter_mut().zip(&self.random) {
            *o = term_value(term, &[], t);
        }
    }

    /// Split `W(t)'β` into `a + c t`: the time-constant part `a` and the slope `c`.
    pub fn fixed_intercept_slope(&self, beta: &[f64], covariates: &[f64]) -> (f64, f64) {
        let mut a = 0.0;
        let mut c = 0.0;
        for (term, b) in self.fixed.iter().zip(beta) {
            match term {
                ResolvedTerm::Intercept => a += b,
                ResolvedTerm::Time => c += b,
                ResolvedTerm::Covariate(i) => a += b * covariates[*i],
            }
        }
        (a, c)
    }
}

fn term_value(term: &ResolvedTerm, covariates: &[f64], t: f64) -> f64 {
    match term {
        ResolvedTerm::Intercept => 1.0,
        ResolvedTerm::Time => t,
        ResolvedTerm::Covariate(i) => covariates[*i],
    }
}

/// A model specification bound to marker families, covariate columns and
/// baseline knots. Everything needed to evaluate the model without the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedModel {
    pub spec: ModelSpec,
    pub markers: Vec<ResolvedMarker>,
    pub covariate_names: Vec<String>,
    pub survival_covariates: Vec<usize>,
    /// Right endpoints of the baseline pieces; the last piece extends to infinity.
    pub knots: Vec<f64>,
    pub re_dim: usize,
}

impl ResolvedModel {
    pub fn build(
        spec: ModelSpec,
        families: &[(String, MarkerFamily)],
        covariate_names: &[String],
        knots: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if spec.markers.is_empty() {
            return Err(ModelError::InvalidSpec("model has no markers".into()));
        }
        let re_dim = spec.random_effect_dim();
        if re_dim > MAX_RE {
            return Err(ModelError::DimensionCap(re_dim));
        }
        if knots.is_empty() {
            return Err(ModelError::InvalidSpec("at least one baseline piece is required".into()));
        }
        if knots[0] <= 0.0 || knots.windows(2).any(|w| w[1] <= w[0]) || knots.iter().any(|k| !k.is_finite()) {
            return Err(ModelError::InvalidSpec(format!("knots must be positive and strictly increasing: {knots:?}")));
        }
        let cov_index = |name: &str| {
            covariate_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| ModelError::InvalidSpec(format!("unknown covariate {name}")))
        };
        let resolve_term = |t: &Term| -> Result<ResolvedTerm, ModelError> {
            Ok(match t {
                Term::Intercept => ResolvedTerm::Intercept,
                Term::Time => ResolvedTerm::Time,
                Term::Covariate(n) => ResolvedTerm::Covariate(cov_index(n)?),
            })
        };

        let mut markers = Vec::with_capacity(spec.markers.len());
        let mut offset = 0;
        let mut seen = Vec::new();
        for m in &spec.markers {
            if m.marker_id == 0 || m.marker_id > families.len() {
                return Err(ModelError::InvalidSpec(format!("unknown marker id {}", m.marker_id)));
            }
            if seen.contains(&m.marker_id) {
                return Err(ModelError::InvalidSpec(format!("marker {} listed twice", m.marker_id)));
            }
            seen.push(m.marker_id);
            if m.fixed.is_empty() {
                return Err(ModelError::InvalidSpec(format!("marker {} has no fixed effects", m.marker_id)));
            }
            for (i, t) in m.fixed.iter().enumerate() {
                if m.fixed[..i].contains(t) {
                    return Err(ModelError::InvalidSpec(format!("repeated fixed term {t:?}")));
                }
            }
            let mut re_intercept = None;
            let mut re_time = None;
            for (j, t) in m.random.iter().enumerate() {
                match t {
                    Term::Intercept if re_intercept.is_none() => re_intercept = Some(offset + j),
                    Term::Time if re_time.is_none() => re_time = Some(offset + j),
                    _ => {
                        return Err(ModelError::InvalidSpec(format!(
                            "random design of marker {} may only hold one intercept and one time term",
                            m.marker_id
                        )))
                    }
                }
                if !m.fixed.contains(t) {
                    return Err(ModelError::InvalidSpec(format!(
                        "random term {t:?} of marker {} is not among its fixed terms",
                        m.marker_id
                    )));
                }
            }
            let (name, family) = families[m.marker_id - 1].clone();
            markers.push(ResolvedMarker {
                index: m.marker_id - 1,
                name,
                family,
                fixed: m.fixed.iter().map(resolve_term).collect::<Result<_, _>>()?,
                random: m.random.iter().map(resolve_term).collect::<Result<_, _>>()?,
                re_offset: offset,
                re_intercept,
                re_time,
            });
            offset += m.random.len();
        }
        let survival_covariates = spec.survival_covariates.iter().map(|n| cov_index(n)).collect::<Result<_, _>>()?;
        Ok(Self { spec, markers, covariate_names: covariate_names.to_vec(), survival_covariates, knots, re_dim })
    }

    pub fn n_pieces(&self) -> usize {
        self.knots.len()
    }

    /// Slot of dataset marker `index` within this model.
    pub fn marker_slot(&self, index: usize) -> Option<usize> {
        self.markers.iter().position(|m| m.index == index)
    }

    /// Check that a dataset exposes the same markers and covariates.
    pub fn check_compatible(&self, dataset: &Dataset) -> Result<(), ModelError> {
        if dataset.covariate_names() != self.covariate_names.as_slice() {
            return Err(ModelError::InvalidSpec("dataset covariates differ from the fitted model's".into()));
        }
        for m in &self.markers {
            match dataset.markers().get(m.index) {
                Some(meta) if meta.family == m.family => {}
                _ => {
                    return Err(ModelError::InvalidSpec(format!(
                        "dataset marker {} does not match the model",
                        m.index + 1
                    )))
                }
            }
        }
        Ok(())
    }
}
