//! Robustness certificates for two-layer networks under ℓ∞ perturbations.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: symmetric matrices and the top eigenpair solver (restarted
//!   Lanczos with a dense fallback).
//! - [`model`]: the two-layer score network `f(x) = V σ(W x)` and its margins.
//! - [`bounds`]: the pairwise certificate matrix, the eigenvalue dual bound and
//!   its minimisation, the exhaustive bilinear oracle, and norm baselines.
//! - [`attacks`]: FGSM and multi-restart PGD lower bounds.
//! - [`train`]: training loops, including the jointly optimised dual regulariser.
//! - [`data`]: IDX parsing and synthetic fixtures.

pub mod attacks;
pub mod bounds;
pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
