//! Uncertainty-aware spatiotemporal forecasting of multi-category visit
//! counts on a graph of locations.
//!
//! The pipeline: a prior spatial graph ([`graph`]), a context encoder that
//! fuses visits, static covariates and time-varying covariates
//! ([`encoder`]), a multi-scale graph state-space backbone ([`backbone`]),
//! quantile / Gaussian / MC-dropout uncertainty heads with post-hoc
//! conformal widening ([`uncertainty`]), scoring ([`metrics`]), synthetic
//! data ([`data`]) and the optimization loop ([`training`]).

// Index loops mirror the math in numeric kernels; `!(x > y)` rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod config;
pub mod data;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
