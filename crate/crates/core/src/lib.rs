//! Simulation laboratory for cohort stepped-wedge cluster randomized trials.
//!
//! The crate covers the whole pipeline of a simulation study:
//!
//! * [`design`] builds and randomizes standard stepped-wedge layouts,
//! * [`datagen`] draws closed- and open-cohort outcome data,
//! * [`lmm`] fits linear mixed models with cluster and individual random
//!   intercepts by REML, with model-based Satterthwaite degrees of freedom,
//! * [`robust`] computes CR0/CR2/CR3 cluster-robust covariances and their
//!   Satterthwaite degrees of freedom,
//! * [`mc`] runs scenario grids and aggregates bias, SE error, Type I error
//!   and power.

pub mod datagen;
pub mod design;
mod error;
pub mod lmm;
pub mod mc;
pub mod rng;
pub mod robust;

pub use datagen::{Cohort, CovariateEffect, Dataset, SimParams};
pub use design::TrialDesign;
pub use error::{Error, Result};
pub use lmm::{FitOptions, FitResult, ModelMatrices, ModelSpec};
pub use mc::{ScenarioConfig, ScenarioSummary};
pub use robust::{Estimator, RobustVcov, TestResult, VcovSource};
