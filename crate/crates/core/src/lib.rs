//! Generalized function-space variational inference for Bayesian neural
//! networks with Gaussian-process priors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod gp_oracle;
pub mod kernels;
pub mod network;
pub mod numerics;
pub mod objective;
pub mod optim;
pub mod trainer;
pub mod variational;

pub use error::{Error, Result};
