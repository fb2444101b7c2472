//! Counterfactual exogenous trajectories for time series forecasts.
//!
//! Given a trained forecaster and a window before an anchor time `T`, the
//! [`ce`] module searches for the smallest change to the exogenous inputs that
//! moves the recursive forecast onto a target trajectory. [`oracle`] solves the
//! same problem in closed form for linear models; [`analysis`] scores solutions
//! and aggregates them over a whole series.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod ce;
pub mod data;
pub mod error;
pub mod forecast;
pub mod oracle;
pub mod simgen;

pub use error::{Error, Result};
