//! Bayesian geographically weighted regression.
//!
//! One model is fitted per sampling location. Each model raises the
//! likelihood of every other location to a kernel weight that decays with
//! distance from the model's geographical centre, samples the resulting
//! geographically-powered posterior with adaptive random-walk Metropolis,
//! and keeps only the coefficients and the centre dispersion. The kernel
//! bandwidth is chosen by cross-validated expected log predictive density.
//!
//! Module map:
//!
//! - [`geo`]: distances and the (truncated) Gaussian kernel
//! - [`likelihood`]: negative-binomial log-likelihood with offset, priors
//! - [`posterior`]: the powered log-posterior for one model and its sampler target
//! - [`mcmc`]: blocked adaptive random-walk Metropolis–Hastings
//! - [`elpd`]: predictive density estimation, fold plans, bandwidth selection
//! - [`pipeline`]: per-location parallel driver, configuration, CSV I/O
//! - [`simgen`]: synthetic lattice generator and error decomposition

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod elpd;
pub mod error;
pub mod geo;
pub mod likelihood;
mod linalg;
pub mod mcmc;
pub mod pipeline;
pub mod posterior;
pub mod simgen;
pub mod special;

pub use error::{Error, Result};
