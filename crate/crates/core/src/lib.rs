//! Collaborative causal-effect estimation across data sites that cannot
//! share individual records.
//!
//! Sites hold observational `(x, z, y)` records drawn under different
//! covariate distributions; a public target sample carries covariates only.
//! The crate estimates the target average treatment effect with
//!
//! - Meta-IPW: per-site Hájek IPW estimates combined by inverse variance,
//! - CLB-IPW: one Hájek IPW estimate against pooled assignment scores,
//!   computed from per-site aggregates,
//! - Meta-AIPW and CLB-AIPW: decoupled doubly robust variants whose outcome
//!   term is averaged over the target sample.
//!
//! Selection propensities are assembled from density ratios
//! ([`ratio::fit_tilting`], [`ratio::fit_knn`]) and are only known up to one
//! shared constant, which every estimator here is invariant to.
//! [`fedsim`] runs the same computations as an explicit site/server message
//! protocol and [`harness`] drives Monte Carlo studies.

// `!(v > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod data;
pub mod error;
pub mod estimators;
pub mod fedsim;
pub mod harness;
pub mod io;
pub mod nuisance;
pub mod ratio;
pub mod report;
pub mod synth;

pub use data::{Arm, SeedSpec, SiteDataset, TargetCovariates, UnitRecord};
pub use error::{Error, Result};
pub use report::{EstimateReport, EstimatorKind};
