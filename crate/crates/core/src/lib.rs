//! Core library: trains small feed-forward classifiers/regressors and
//! reconstructs their training samples from the trained parameters alone.
//!
//! The pipeline is:
//!
//! 1. [`data_io`] loads or generates a mean-subtracted dataset in `[-1, 1]^d`.
//! 2. [`models`] + [`training`] fit a (typically bias-free) network with
//!    full-batch gradient descent, optionally with weight decay.
//! 3. [`reconstruction`] optimizes a set of candidate inputs and dual
//!    coefficients so that the trained parameter vector is explained as a
//!    weighted sum of per-sample gradients (a stationarity condition).
//! 4. [`analysis`] matches candidates back to training samples and scores
//!    the reconstructions with SSIM.
//! 5. [`harness`] orchestrates hyperparameter searches over reconstruction
//!    runs and persists checkpoints, candidate dumps, and reports.
//!
//! Everything is deterministic given the seeds recorded in the manifests.

pub mod analysis;
pub mod autodiff;
pub mod data_io;
pub mod error;
pub mod harness;
pub mod models;
pub mod reconstruction;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
