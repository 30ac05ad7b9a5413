//! Propensity score estimation by local balance and local calibration.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod benchmark;
pub mod data;
pub mod diagnostics;
pub mod estimators;
pub mod io;
pub mod error;
pub mod kernel;
pub mod logistic;
pub mod network;
pub mod objective;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
