//! Data-driven predictive control from Hankel data: LQ factorization,
//! causal and unconstrained multi-step predictors, a dense ADMM QP solver,
//! receding-horizon controllers and plant simulators.
//!
//! Builds without `std` (only `alloc` is required) when the default `std`
//! feature is turned off.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod linalg;
pub mod controller;
pub mod lq;
pub mod predictor;
pub mod qp;
pub mod sim;
pub mod traj;

pub use error::{Error, Result};
