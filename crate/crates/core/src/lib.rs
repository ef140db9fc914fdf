//! Exponential Cox proportional-hazards survival models parameterized by a
//! small feedforward network, trained with certified adversarial
//! regularization and evaluated under covariate perturbation.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod objectives;
pub mod output;
pub mod selftest;
pub mod survival;
pub mod trainer;

pub use error::{Error, Result};
