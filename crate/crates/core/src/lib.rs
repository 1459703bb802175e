//! Inter-regional functional connectivity from voxel-level spatiotemporal
//! signals, estimated by two-stage restricted maximum likelihood in a
//! Gaussian linear mixed model.
//!
//! The crate provides the model simulator, the intra-regional (stage 1) and
//! inter-regional (stage 2) ReML fits with structure-exploiting likelihood
//! evaluations, correlation-of-averages baselines, asymptotic uncertainty
//! quantification, and FDR-controlled network construction, together with
//! the CSV/JSON dataset formats used by the `fcmix` CLI.

pub mod basis;
pub mod baselines;
pub mod error;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod network;
pub mod optimize;
pub mod scalar;
pub mod simulator;
pub mod stage1;
pub mod stage2;

pub use error::{Error, Result};

/// Scalar type used by the estimation pipeline.
pub type Scalar = f64;
