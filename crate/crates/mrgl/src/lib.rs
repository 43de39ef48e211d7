//! Multi-resolution group lasso for sparse additive regression.
//!
//! Each covariate is expanded into resolution levels of a nonparametric
//! basis (or a fixed parametric block). Levels are penalized as groups with
//! level-dependent weights, so the estimator adapts to unknown smoothness.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod cli;
pub mod error;
pub mod model;
pub mod penalties;
pub mod solver;
pub mod theory;

pub use basis::{BasisFamily, ComponentKind, GroupKey, GroupedDesign, ResolutionScheme};
pub use error::{Error, Result};
pub use penalties::PenaltySchedule;
pub use solver::{fit, FitConfig, FitResult, LossVariant};
