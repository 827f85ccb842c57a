//! Two-stage adaptive D-optimal design and maximum-likelihood estimation for
//! nonlinear regression with Gaussian errors.
//!
//! The library covers the full pipeline for mean functions such as the Emax
//! dose-response model:
//!
//! - [`model`] — mean functions with gradients and second derivatives;
//! - [`design`] — approximate/exact designs, Fisher information, the
//!   closed-form locally D-optimal Emax design and a brute-force verifier;
//! - [`estimation`] — data simulation, likelihood kernel, score, profiled
//!   least-squares MLE and the first-order bias of the interim estimate of
//!   the half-effect dose;
//! - [`asymptotics`] — per-subject information, sampling from the Gaussian
//!   mixture limit law of the final MLE under a fixed first stage, and its
//!   Monte Carlo asymptotic variance;
//! - [`simulation`] — the paired fixed-versus-adaptive Monte Carlo study with
//!   deterministic parallel seeding;
//! - [`cli`] — the `adl` command-line front end.

pub mod accum;
pub mod asymptotics;
pub mod cli;
pub mod config;
pub mod design;
pub mod error;
pub mod estimation;
pub mod model;
pub(crate) mod numfmt;
pub mod rng;
pub mod simulation;

pub use error::{Error, Result};
