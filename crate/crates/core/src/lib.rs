//! Proxy causal inference with neural maximum moment restriction (NMMR)
//! estimators, synthetic benchmarks, and an evaluation harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod kernels;
pub mod nn;
pub mod report;
pub mod scm;
pub mod tensor;

pub use error::{Error, Result};
