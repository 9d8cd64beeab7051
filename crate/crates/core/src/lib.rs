//! Linear mixed-effects estimation when a covariate (time of an event) is
//! right-censored.
//!
//! The pipeline is:
//!
//! 1. fit a Cox model for the censored event time given subject-level
//!    covariates ([`cox`]),
//! 2. replace censored times by their estimated conditional means ([`impute`]),
//! 3. solve the closed-form efficient-score estimating equation, which
//!    removes the imputation (Berkson) error and the random effects without
//!    modelling either ([`score`], [`estimator`]).
//!
//! REML-based baselines ([`baselines`]), a simulation harness ([`simulate`])
//! and a two-arm sample-size calculator ([`power`]) sit alongside.
//!
//! Parameter vectors are always ordered `(beta_1, .., beta_pa, alpha, sigma2)`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cox;
pub mod data;
pub mod error;
pub mod estimator;
pub mod impute;
pub mod numerics;
pub mod power;
pub mod report;
pub mod rng;
pub mod score;
pub mod simulate;

pub use data::{ColumnNames, CsvSchema, LongitudinalDataset, SubjectRecord, Theta, ThetaEstimate};
pub use error::{Error, Result};
