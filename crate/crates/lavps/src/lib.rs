//! Variational diffusion posterior sampling for Bayesian linear inverse problems.
//!
//! This crate implements two posterior samplers on top of a denoising
//! diffusion prior:
//!
//! - **MGDM**: a zero-shot midpoint-Gibbs sampler in which each inner
//!   conditional is approximated by a diagonal Gaussian fitted by
//!   reparameterized KL minimization under explicit likelihood guidance.
//! - **LAVPS**: the same sampler with each inner variational problem
//!   warm-started by a trained inference model and guarded by an
//!   objective-comparison safeguard, which falls back to the zero-shot
//!   initialization whenever the warm start is worse.
//!
//! Everything is built at desk scale: priors are analytic Gaussian mixtures,
//! so exact denoisers and exact posteriors are available as oracles for every
//! approximation in the pipeline. The `bench` module turns those oracles into
//! a reproducible benchmark harness (metrics CSVs, Pareto extraction, paired
//! non-inferiority testing), and the `cli` module binds it all to a command
//! line.

pub mod amortizer;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod nn;
pub mod operators;
pub mod prior;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod variational;

pub use error::{Error, Result};
