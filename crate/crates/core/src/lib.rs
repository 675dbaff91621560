//! Iterative estimating equations for longitudinal regression.
//!
//! The regression coefficients and the within-subject covariances are
//! estimated alternately: the coefficients by generalized estimating
//! equations given the current covariances, the covariances by the method of
//! moments given the current coefficients. For a linear mean this is
//! iteratively reweighted least squares.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod covariance;
pub mod dataset;
pub mod gee;
pub mod grouping;
pub mod iee;
pub mod mean_model;
pub mod quadrature;
pub mod rng;
pub mod simulation;

pub use covariance::{
    estimate_componentwise, estimate_matrixwise, estimate_matrixwise_by_pattern, repair_pd,
    CovarianceEstimate, MomError, RepairMode, RepairPolicy,
};
pub use dataset::{DatasetError, LongitudinalDataset, RawRow, SubjectRecord};
pub use gee::{
    blue_linear, model_based_covariance, ols_linear, solve_gee, CovarianceSet, GeeError, GeeOptions,
};
pub use grouping::{ClassKey, CovarianceGrouping, GroupingError, GroupingSpec, PartitionDesign};
pub use iee::{
    convergence_rate_diagnostic, fit_iee, one_step_fit, FitKind, FitResult, IeeError, IeeOptions,
    TraceEntry,
};
pub use mean_model::{MeanFunction, MeanModel, ModelError};
pub use simulation::{
    exact_blue_covariance, generate, monte_carlo, CaseParams, Design, Estimator, McSummary,
    NoiseScenario, ScenarioSpec, SimError, SimulationDesign,
};
