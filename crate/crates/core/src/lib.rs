//! On-policy RL for a small autoregressive transformer policy on synthetic
//! tasks with verifiable answers.

// `!(x >= 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advantage;
pub mod error;
pub mod policy;
pub mod rng;
pub mod sampler;
pub mod tasks;
pub mod trainer;
pub mod updates;

pub use error::{Error, Result};
