use thiserror::Error;

use crate::dataset::SubjectId;

/// Errors raised while building, reading or slicing a [`crate::Dataset`].
#[derive(Debug, Error)]
pub enum DataError {
    #[error("orphan observation: subject {0} has no survival record")]
    OrphanObservation(SubjectId),
    #[error("observation after event time: subject {subject} marker {marker} at t = {time} > T* = {observed}")]
    ObservationAfterEventTime { subject: SubjectId, marker: usize, time: f64, observed: f64 },
    #[error("non-binary value {value} for binary marker {marker} (subject {subject})")]
    NonBinaryValue { subject: SubjectId, marker: usize, value: f64 },
    #[error("duplicate survival record for subject {0}")]
    DuplicateSurvivalRecord(SubjectId),
    #[error("duplicate observation for subject {subject}, marker {marker}, time {time}")]
    DuplicateObservation { subject: SubjectId, marker: usize, time: f64 },
    #[error("unknown marker index {0}")]
    UnknownMarker(usize),
    #[error("subject {0} not found")]
    UnknownSubject(SubjectId),
    #[error("subject {subject} not at risk at s = {landmark} (T* = {observed})")]
    NotAtRisk { subject: SubjectId, landmark: f64, observed: f64 },
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("cannot split {subjects} subjects into {folds} folds")]
    TooManyFolds { folds: usize, subjects: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Errors raised by model specification, likelihood evaluation and fitting.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("random-effect dimension {0} exceeds the cap of 6")]
    DimensionCap(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no events: survival parameters unidentifiable")]
    NoEvents,
    #[error("quadrature mode search failed to converge for subject {0}")]
    ModeSearch(SubjectId),
    #[error("initialization failure: non-finite likelihood after {0} re-scalings")]
    Initialization(usize),
    #[error("invalid parameter vector: {0}")]
    InvalidParameters(String),
    #[error("model not converged")]
    NotConverged,
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Errors raised by metric and model-averaging computations.
#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty risk set at s = {0}")]
    EmptyRiskSet(f64),
    #[error("censoring support exhausted before s+t = {0}")]
    CensoringExhausted(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("all IPCW weights are zero")]
    ZeroWeights,
    #[error("empty prediction matrix")]
    EmptyMatrix,
    #[error("subject {0} has no prediction")]
    MissingPrediction(SubjectId),
}

/// Top-level error for orchestration and the command line.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
