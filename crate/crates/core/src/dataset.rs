//! Immutable data model for longitudinal markers and right-censored survival.
//!
//! Longitudinal data is kept in long format (one row per subject, marker and
//! measurement time), which tolerates marker-specific visit schedules.
//! Survival data holds exactly one record per subject. A [`Dataset`] can only
//! be obtained through validation; after that it never changes.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubjectId(pub u64);

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Distribution family of a marker. Gaussian markers use the identity link
/// with a free residual variance; binary markers use the logit link with unit
/// dispersion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkerFamily {
    Gaussian,
    Binary,
}

impl MarkerFamily {
    pub fn has_dispersion(self) -> bool {
        matches!(self, MarkerFamily::Gaussian)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerMeta {
    pub name: String,
    pub family: MarkerFamily,
}

/// One measurement `Y_ik(t)`. `marker` is a zero-based index into the
/// dataset's marker table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LongitudinalObservation {
    pub subject: SubjectId,
    pub marker: usize,
    pub time: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalRecord {
    pub subject: SubjectId,
    /// `T* = min(T, C)`.
    pub observed_time: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    subjects: Vec<SurvivalRecord>,
    observations: Vec<LongitudinalObservation>,
    markers: Vec<MarkerMeta>,
    covariate_names: Vec<String>,
    obs_ranges: Vec<Range<usize>>,
}

/// Marker history of one subject up to a landmark time `s`, for a subject
/// still event-free at `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectHistory {
    pub subject: SubjectId,
    pub landmark: f64,
    pub observations: Vec<LongitudinalObservation>,
    pub covariates: Vec<f64>,
}

impl Dataset {
    /// Validate raw tables into a dataset. Subjects are sorted by id and
    /// observations by (subject, marker, time).
    pub fn new(
        mut subjects: Vec<SurvivalRecord>,
        mut observations: Vec<LongitudinalObservation>,
        markers: Vec<MarkerMeta>,
        covariate_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if subjects.is_empty() {
            return Err(DataError::Invalid("dataset has no subjects".into()));
        }
        if markers.is_empty() {
            return Err(DataError::Invalid("dataset has no markers".into()));
        }
        subjects.sort_by_key(|r| r.subject);
        for pair in subjects.windows(2) {
            if pair[0].subject == pair[1].subject {
                return Err(DataError::DuplicateSurvivalRecord(pair[0].subject));
            }
        }
        for r in &subjects {
            if !(r.observed_time.is_finite() && r.observed_time > 0.0) {
                return Err(DataError::Invalid(format!(
                    "subject {}: observed time must be positive, got {}",
                    r.subject, r.observed_time
                )));
            }
            if r.covariates.len() != covariate_names.len() {
                return Err(DataError::Invalid(format!(
                    "subject {}: {} covariates, expected {}",
                    r.subject,
                    r.covariates.len(),
                    covariate_names.len()
                )));
            }
            if r.covariates.iter().any(|x| !x.is_finite()) {
                return Err(DataError::Invalid(format!("subject {}: non-finite covariate", r.subject)));
            }
        }

        observations
            .sort_by(|a, b| a.subject.cmp(&b.subject).then(a.marker.cmp(&b.marker)).then(a.time.total_cmp(&b.time)));
        let mut obs_ranges = vec![0..0; subjects.len()];
        let mut start = 0;
        let mut si = 0;
        for (idx, o) in observations.iter().enumerate() {
            if o.marker >= markers.len() {
                return Err(DataError::UnknownMarker(o.marker));
            }
            if !(o.time.is_finite() && o.time >= 0.0) {
                return Err(DataError::Invalid(format!(
                    "subject {}: observation time must be >= 0, got {}",
                    o.subject, o.time
                )));
            }
            if !o.value.is_finite() {
                return Err(DataError::Invalid(format!("subject {}: non-finite marker value", o.subject)));
            }
            if markers[o.marker].family == MarkerFamily::Binary && o.value != 0.0 && o.value != 1.0 {
                return Err(DataError::NonBinaryValue { subject: o.subject, marker: o.marker, value: o.value });
            }
            if idx > 0 {
                let p = &observations[idx - 1];
                if p.subject == o.subject && p.marker == o.marker && p.time == o.time {
                    return Err(DataError::DuplicateObservation { subject: o.subject, marker: o.marker, time: o.time });
                }
            }
            if idx == 0 || observations[idx - 1].subject != o.subject {
                if idx > 0 {
                    obs_ranges[si] = start..idx;
                }
                si = subjects
                    .binary_search_by_key(&o.subject, |r| r.subject)
                    .map_err(|_| DataError::OrphanObservation(o.subject))?;
                start = idx;
            }
            let observed = subjects[si].observed_time;
            if o.time > observed {
                return Err(DataError::ObservationAfterEventTime {
                    subject: o.subject,
                    marker: o.marker,
                    time: o.time,
                    observed,
                });
            }
        }
        if !observations.is_empty() {
            obs_ranges[si] = start..observations.len();
        }

        Ok(Self { subjects, observations, markers, covariate_names, obs_ranges })
    }

    pub fn subjects(&self) -> &[SurvivalRecord] {
        &self.subjects
    }

    pub fn observations(&self) -> &[LongitudinalObservation] {
        &self.observations
    }

    pub fn markers(&self) -> &[MarkerMeta] {
        &self.markers
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_markers(&self) -> usize {
        self.markers.len()
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|r| r.event).count()
    }

    pub fn subject_ids(&self) -> Vec<SubjectId> {
        self.subjects.iter().map(|r| r.subject).collect()
    }

    pub fn subject_index(&self, id: SubjectId) -> Option<usize> {
        self.subjects.binary_search_by_key(&id, |r| r.subject).ok()
    }

    /// Observations of the subject at position `index`, sorted by (marker, time).
    pub fn subject_observations(&self, index: usize) -> &[LongitudinalObservation] {
        &self.observations[self.obs_ranges[index].clone()]
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn marker_index(&self, name: &str) -> Option<usize> {
        self.markers.iter().position(|m| m.name == name)
    }

    /// Ids of subjects still event-free and uncensored at `s` (`T* > s`).
    pub fn at_risk(&self, s: f64) -> Vec<SubjectId> {
        self.subjects.iter().filter(|r| r.observed_time > s).map(|r| r.subject).collect()
    }

    /// Marker history of `subject` up to and including time `s`.
    pub fn truncate_history(&self, subject: SubjectId, s: f64) -> Result<SubjectHistory, DataError> {
        let idx = self.subject_index(subject).ok_or(DataError::UnknownSubject(subject))?;
        let rec = &self.subjects[idx];
        if rec.observed_time <= s {
            return Err(DataError::NotAtRisk { subject, landmark: s, observed: rec.observed_time });
        }
        Ok(SubjectHistory {
            subject,
            landmark: s,
            observations: self.subject_observations(idx).iter().filter(|o| o.time <= s).copied().collect(),
            covariates: rec.covariates.clone(),
        })
    }

    /// Sub-dataset restricted to the given subjects (unknown ids are ignored).
    pub fn subset(&self, ids: &[SubjectId]) -> Dataset {
        let keep: HashSet<SubjectId> = ids.iter().copied().collect();
        let subjects: Vec<SurvivalRecord> =
            self.subjects.iter().filter(|r| keep.contains(&r.subject)).cloned().collect();
        let observations: Vec<LongitudinalObservation> =
            self.observations.iter().filter(|o| keep.contains(&o.subject)).copied().collect();
        Dataset::new(subjects, observations, self.markers.clone(), self.covariate_names.clone())
            .expect("subset of a valid dataset is valid")
    }

    /// Subject-level K-fold partition: returns `(learning, validation)` pairs.
    pub fn kfold_split(&self, folds: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>, DataError> {
        let assignment = self.fold_assignment(folds, seed)?;
        Ok(assignment
            .iter()
            .map(|validation| {
                let keep: HashSet<SubjectId> = validation.iter().copied().collect();
                let learning: Vec<SubjectId> = self.subject_ids().into_iter().filter(|id| !keep.contains(id)).collect();
                (self.subset(&learning), self.subset(validation))
            })
            .collect())
    }

    /// Validation id sets of a K-fold partition, each sorted.
    pub fn fold_assignment(&self, folds: usize, seed: u64) -> Result<Vec<Vec<SubjectId>>, DataError> {
        let n = self.n_subjects();
        if folds < 2 || folds > n {
            return Err(DataError::TooManyFolds { folds, subjects: n });
        }
        let mut ids = self.subject_ids();
        ids.shuffle(&mut seeds::rng_from(seeds::derive_seed(seed, &[0x6b_666f_6c64])));
        let mut out = vec![Vec::new(); folds];
        for (pos, id) in ids.into_iter().enumerate() {
            out[pos % folds].push(id);
        }
        for v in &mut out {
            v.sort();
        }
        Ok(out)
    }

    /// Random subject-level learning/validation split with the given
    /// learning fraction (rounded to the nearest subject, both sides nonempty).
    pub fn holdout_split(&self, learning_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
        let n = self.n_subjects();
        if !(learning_fraction > 0.0 && learning_fraction < 1.0) || n < 2 {
            return Err(DataError::Invalid(format!(
                "cannot split {n} subjects with learning fraction {learning_fraction}"
            )));
        }
        let n_learn = ((n as f64 * learning_fraction).round() as usize).clamp(1, n - 1);
        let mut ids = self.subject_ids();
        ids.shuffle(&mut seeds::rng_from(seeds::derive_seed(seed, &[0x686f_6c64])));
        let (learn, valid) = ids.split_at(n_learn);
        Ok((self.subset(learn), self.subset(valid)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> Vec<MarkerMeta> {
        vec![
            MarkerMeta { name: "y1".into(), family: MarkerFamily::Gaussian },
            MarkerMeta { name: "y2".into(), family: MarkerFamily::Binary },
        ]
    }

    fn rec(id: u64, t: f64, event: bool) -> SurvivalRecord {
        SurvivalRecord { subject: SubjectId(id), observed_time: t, event, covariates: vec![] }
    }

    fn obs(id: u64, marker: usize, time: f64, value: f64) -> LongitudinalObservation {
        LongitudinalObservation { subject: SubjectId(id), marker, time, value }
    }

    fn toy() -> Dataset {
        Dataset::new(
            vec![rec(2, 3.0, true), rec(1, 1.5, false)],
            vec![
                obs(2, 1, 0.0, 1.0),
                obs(1, 0, 0.8, 0.1),
                obs(1, 0, 0.0, 0.3),
                obs(1, 0, 0.4, 0.2),
                obs(2, 0, 0.0, -1.0),
            ],
            meta(),
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn validate_sorts() {
        let d = toy();
        assert_eq!(d.subject_ids(), vec![SubjectId(1), SubjectId(2)]);
        let times: Vec<f64> = d.subject_observations(0).iter().map(|o| o.time).collect();
        assert_eq!(times, vec![0.0, 0.4, 0.8]);
        assert_eq!(d.subject_observations(1).len(), 2);
        assert_eq!(d.subject_observations(1)[0].marker, 0);
    }

    #[test]
    fn rejects_observation_after_event() {
        let err = Dataset::new(vec![rec(1, 3.0, true)], vec![obs(1, 0, 5.0, 0.0)], meta(), vec![]).unwrap_err();
        assert!(err.to_string().contains("observation after event time"));
    }

    #[test]
    fn rejects_non_binary() {
        let err = Dataset::new(vec![rec(1, 3.0, true)], vec![obs(1, 1, 1.0, 0.7)], meta(), vec![]).unwrap_err();
        assert!(err.to_string().contains("non-binary value"));
    }

    #[test]
    fn rejects_orphans_and_duplicates() {
        let e = Dataset::new(vec![rec(1, 3.0, true)], vec![obs(9, 0, 1.0, 0.0)], meta(), vec![]).unwrap_err();
        assert!(matches!(e, DataError::OrphanObservation(SubjectId(9))));
        let e = Dataset::new(vec![rec(1, 3.0, true), rec(1, 2.0, false)], vec![], meta(), vec![]).unwrap_err();
        assert!(matches!(e, DataError::DuplicateSurvivalRecord(SubjectId(1))));
        let e = Dataset::new(vec![rec(1, 3.0, true)], vec![obs(1, 0, 1.0, 0.0), obs(1, 0, 1.0, 2.0)], meta(), vec![])
            .unwrap_err();
        assert!(matches!(e, DataError::DuplicateObservation { .. }));
    }

    #[test]
    fn truncate_history_keeps_rows_up_to_s() {
        let d = toy();
        let h = d.truncate_history(SubjectId(1), 0.5).unwrap();
        let times: Vec<f64> = h.observations.iter().map(|o| o.time).collect();
        assert_eq!(times, vec![0.0, 0.4]);

        let h0 = d.truncate_history(SubjectId(2), 0.0).unwrap();
        assert!(h0.observations.iter().all(|o| o.time == 0.0));
        assert_eq!(h0.observations.len(), 2);
    }

    #[test]
    fn truncate_history_requires_risk() {
        let d = Dataset::new(vec![rec(1, 2.0, true)], vec![], meta(), vec![]).unwrap();
        let err = d.truncate_history(SubjectId(1), 2.0).unwrap_err();
        assert!(err.to_string().contains("not at risk"));
    }

    fn many(n: u64) -> Dataset {
        Dataset::new((1..=n).map(|i| rec(i, 1.0, i % 2 == 0)).collect(), vec![], meta(), vec![]).unwrap()
    }

    #[test]
    fn kfold_partition() {
        let d = many(10);
        let folds = d.kfold_split(5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all = Vec::new();
        for (learn, valid) in &folds {
            assert_eq!(valid.n_subjects(), 2);
            assert_eq!(learn.n_subjects(), 8);
            all.extend(valid.subject_ids());
        }
        all.sort();
        assert_eq!(all, d.subject_ids());
        assert_eq!(d.fold_assignment(5, 3).unwrap(), d.fold_assignment(5, 3).unwrap());
    }

    #[test]
    fn kfold_sizes_312() {
        let d = many(312);
        let mut sizes: Vec<usize> = d.fold_assignment(5, 11).unwrap().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![62, 62, 62, 63, 63]);
        assert!(d.fold_assignment(313, 1).is_err());
        assert!(many(3).kfold_split(4, 1).is_err());
    }

    #[test]
    fn holdout_split_sizes() {
        let d = many(300);
        let (l, v) = d.holdout_split(0.8, 5).unwrap();
        assert_eq!((l.n_subjects(), v.n_subjects()), (240, 60));
    }
}
