//! Softmax-family Fenchel-Young losses, partition-function approximations,
//! and the analysis/experiment machinery around them.
//!
//! The crate is organized around the F-Y recipe: a convex regularizer Omega
//! induces a prediction mapping (the gradient of its conjugate) and a convex
//! loss whose gradient is the residual `p_hat(s) - y`. [`simplex_maps`] holds
//! the mappings and their Jacobians, [`fy_losses`] the exact losses,
//! [`approx`] the log-partition approximation schemes (sampled softmax, NCE,
//! hierarchical softmax, the RG quadratic surrogate), [`divergence_lab`] the
//! Delta-method bias/variance calculators, [`metrics`] ranking metrics and
//! tie/alignment diagnostics, [`oracles`] brute-force consistency checks,
//! [`trainer`] a matrix-factorization training harness, and [`datasets`]
//! ingestion plus synthetic data generation. The `fybench` binary drives
//! experiments from the command line.

pub mod approx;
pub mod cli;
pub mod datasets;
pub mod divergence_lab;
pub mod error;
pub mod fy_losses;
pub mod metrics;
pub mod oracles;
pub mod simplex_maps;
pub mod trainer;

pub use error::{Error, Result};
