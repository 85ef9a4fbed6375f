//! Joint continuous-time modeling of treatment and outcome event sequences.
//!
//! The library combines a GP-modulated marked point process for treatments
//! with a conditional GP for outcomes, learned from observational data, and
//! answers observational, interventional and counterfactual policy queries
//! by simulation. Counterfactuals use noise abduction plus a thinning-based
//! counterfactual sampler that handles history-dependent intensities.
//!
//! Module map:
//! - [`kernels`]: covariance functions, including the masked regressive
//!   treatment kernel and the windowed response-shape kernel
//! - [`treatment`]: squared-GP conditional intensity, sparse variational
//!   inference with closed-form integrals, mark model
//! - [`outcome`]: hierarchical conditional-GP outcome model
//! - [`sampler`]: Ogata thinning, noise abduction, counterfactual and
//!   fixed-noise sampling
//! - [`engine`]: query execution against a fitted joint model
//! - [`data`]: dataset formats, validation, meal-diary preprocessing
//! - [`harness`]: semi-synthetic simulator, benchmark grid and metrics

pub mod data;
pub mod engine;
pub mod error;
pub mod harness;
pub mod jsonfmt;
pub mod kernels;
pub mod outcome;
pub mod sampler;
pub mod treatment;

pub use error::{Error, Result};
