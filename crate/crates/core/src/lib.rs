//! Inference for conditional moment inequalities with box-indexed
//! Kolmogorov-Smirnov statistics.
//!
//! The crate computes the exact statistic, builds subsampling and
//! rate-adaptive critical values, runs smoothness pre-tests based on local
//! quadratic regression, simulates the nonstandard limit law from plug-in
//! estimates, and ships the Monte Carlo designs used to study all of these.

// `!(x > 0.0)` is deliberate: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod design;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numeric;
pub mod plugin;
pub mod pretest;
pub mod resampling;
pub mod rng;
pub mod sim;

pub use engine::{ks_statistic, min_box_exact, min_interval_1d, scaled_statistic, KSResult, KsEngine, OpenBox};
pub use error::{Error, Result};
pub use model::{
    aggregate, evaluate_moments, Aggregator, CallbackModel, Dataset, IntervalColumns, IntervalMeanModel,
    IntervalMedianModel, MomentModel, UpperBoundModel,
};
pub use numeric::Matrix;
