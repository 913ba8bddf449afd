//! Dynamic event-risk prediction from many longitudinal markers.
//!
//! One- and two-marker joint models are fitted by maximum likelihood, their
//! individual predictions are combined with time-dependent weights that
//! minimize an inverse-probability-of-censoring weighted Brier score, and
//! everything is scored with censoring-robust metrics on simulated or real
//! data.

pub mod averaging;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod io;
pub mod joint_model;
pub(crate) mod linalg;
pub mod metrics;
pub mod prediction;
pub mod seeds;
pub mod simulation;

pub use dataset::{
    Dataset, LongitudinalObservation, MarkerFamily, MarkerMeta, SubjectHistory, SubjectId, SurvivalRecord,
};
pub use error::{DataError, Error, MetricError, ModelError, Result};
