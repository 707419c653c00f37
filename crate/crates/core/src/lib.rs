//! Split conformal prediction on top of approximate Bayesian inference for
//! small fully-connected classifiers.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`] – the observation model: an MLP with manual backpropagation and a
//!   Gaussian-prior log joint.
//! * [`inference`] – MAP/SGD, deep ensembles, mean-field VI, SGHMC and a
//!   last-layer Laplace approximation, plus the posterior predictive.
//! * [`conformal`] – credible sets, `thr` and `aps` scores, calibration and
//!   prediction-set construction.
//! * [`data`] – seeded Gaussian-blob datasets with graded distribution shift.
//! * [`harness`] – the experiment grid, metrics, confidence diagnosis and
//!   report writers used by the `bayescp` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conformal;
pub mod data;
pub mod error;
pub mod harness;
pub mod inference;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
