//! Simulation and targeted estimation for sequential adaptive experiments.
//!
//! The crate simulates experiments in which each unit's treatment
//! randomization function may depend on all earlier units, and estimates the
//! average treatment effect with TMLEs and AIPW estimators weighted either by
//! the average design `gbar_n` or by each unit's own design.
//!
//! Numeric code is generic over [`Real`]; the aliases below fix the scalar to
//! `f64` or `f32`. The Monte Carlo [`harness`] works in `f64`.

// `!(x > 0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod designs;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod io;
pub mod learners;
pub mod quadrature;
pub mod scalar;
pub mod trial;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Observation = trial::Observation<f64>;
pub type DesignFunction = trial::DesignFunction<f64>;
pub type Trajectory = trial::Trajectory<f64>;
pub type Scenario = dgp::Scenario<f64>;
pub type OutcomeModel = learners::OutcomeModel<f64>;
pub type EstimateReport = estimators::EstimateReport<f64>;
pub type DesignPolicy = designs::DesignPolicy<f64>;

pub type Observation32 = trial::Observation<f32>;
pub type DesignFunction32 = trial::DesignFunction<f32>;
pub type Trajectory32 = trial::Trajectory<f32>;
pub type Scenario32 = dgp::Scenario<f32>;
pub type OutcomeModel32 = learners::OutcomeModel<f32>;
pub type EstimateReport32 = estimators::EstimateReport<f32>;
pub type DesignPolicy32 = designs::DesignPolicy<f32>;
