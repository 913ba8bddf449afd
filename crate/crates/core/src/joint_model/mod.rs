//! Shared-random-effect joint model for several longitudinal markers and one
//! event: specification, likelihood by adaptive Gauss–Hermite quadrature, and
//! maximum-likelihood fitting.

mod fit;
mod hazard;
mod likelihood;
mod optim;
mod params;
pub mod quadrature;
mod spec;
pub(crate) mod subject;

pub use fit::{fit, FitOptions, FittedJointModel, NaturalEstimate};
pub use hazard::{cumulative_hazard, hazard, linear_predictor, marker_loglik};
pub use likelihood::{joint_loglik, joint_loglik_gradient};
pub use params::{MarkerParams, ParameterLayout, ParameterVector};
pub use quadrature::QuadratureConfig;
pub use spec::{
    quantile_knots, Association, BaselineSpec, MarkerSpec, ModelSpec, ResolvedMarker, ResolvedModel, ResolvedTerm, Term,
};

pub(crate) use hazard::{hazard_line, interval_cumhaz};
