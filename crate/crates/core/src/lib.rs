//! Trust-calibration policy gateway.
//!
//! A Gaussian-process probit model over `(action, context)` pairs decides
//! whether a proposed agent tool call is allowed, blocked, or escalated to a
//! human, and learns from the supervisor's approve/deny feedback.

// `!(x > 0.0)` rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod features;
pub mod gateway;
pub mod inference;
pub mod kernel;
pub mod metrics;
pub mod oracle;
pub mod probit;
pub mod quadrature;

pub use error::{Error, Result};
