//! Stochastic optimal control by matching.
//!
//! Controlled SDE simulation, importance weights, a small reverse-mode
//! differentiation engine with the networks built on it, the matching loss
//! with learned reparameterization matrices, the standard iterative
//! diffusion optimization losses, closed-form and numerical optimal
//! controls, a Gaussian warm start, evaluation metrics, and the training
//! loop.
//!
//! The crate is `no_std` with `alloc`. Enable the `std` feature for
//! `std::error::Error` impls and the faster runtime-dispatched GEMM kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adam;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod ground_truth;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod problem;
pub mod reparam;
pub mod rng;
pub mod runner;
pub mod sim;
pub mod warmstart;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use problem::{make_setting, InitialLaw, ProblemSpec, Setting};
