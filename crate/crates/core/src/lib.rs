//! Influence-function estimates for small dense classifiers, with
//! leave-one-out retraining as ground truth and diagnostics for how far the
//! two disagree.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`] forward/backward/Hessian-vector kernels for dense MLPs,
//! * [`data`] Iris, Gaussian blobs and IDX ingestion, splitting, scaling,
//! * [`training`] full-batch gradient descent and reweighted retraining,
//! * [`curvature`] dense Hessians, damping, Cholesky solves, power iteration,
//! * [`ihvp`] inverse-Hessian-vector products (dense, CG, LiSSA),
//! * [`influence`] parameter/pair/group influence and rankings,
//! * [`groundtruth`] leave-one-out and leave-group-out retraining records,
//! * [`metrics`] correlations, selection rules, Taylor-gap tables,
//! * [`runner`] JSON-configured experiment sweeps with a content-addressed cache.

pub mod data;
pub mod error;
pub mod fingerprint;
pub mod linalg;
pub mod nn;
pub mod training;
pub mod oracle;
pub mod curvature;
pub mod ihvp;
pub mod influence;
pub mod cache;
pub mod groundtruth;
pub mod metrics;
pub mod runner;

pub use error::{InfluenceError, Result};
