//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Gradients are produced by a tape-to-tape transform: [`Tape::gradient`]
//! appends the backward pass as ordinary tape nodes and returns their ids.
//! Because the backward rule of every operation is itself expressed in tape
//! operations, the transform can be applied to its own output, which gives
//! second-order derivatives (reverse-over-reverse). Nothing is evaluated
//! until an [`Evaluator`] runs the tape against concrete leaf bindings.
//!
//! Tapes are immutable once built; evaluation holds all mutable state in the
//! evaluator, so one tape can be shared across threads with disjoint
//! bindings.

mod check;
mod exec;
mod grad;
mod tape;

pub use check::finite_diff_check;
pub use exec::{Evaluator, Schedule};
pub use tape::{NodeId, Op, Tape};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which derivative is substituted for ReLU when a backward pass is recorded.
///
/// The forward value is always `max(0, z)`; only the multiplier applied to
/// the upstream gradient changes.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BackwardMode {
    /// Subgradient `1[z > 0]` (zero at z = 0).
    ExactRelu,
    /// `sigmoid(alpha * z)`: the derivative of a softplus with sharpness
    /// `alpha`. Tends to the exact ReLU derivative as `alpha` grows.
    SmoothRelu { alpha: f64 },
    /// `alpha * sigmoid(z)`. Does not tend to the ReLU derivative for large
    /// `alpha`; kept selectable for side-by-side comparison with
    /// [`BackwardMode::SmoothRelu`].
    AmplifiedSigmoid { alpha: f64 },
}

impl BackwardMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BackwardMode::ExactRelu => Ok(()),
            BackwardMode::SmoothRelu { alpha } | BackwardMode::AmplifiedSigmoid { alpha } => {
                if alpha.is_finite() && alpha > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(format!(
                        "backward sharpness alpha must be positive and finite, got {alpha}"
                    )))
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// The substituted ReLU backward: elementwise `sigmoid(alpha * z)`.
///
/// The forward ReLU output is unchanged by the substitution; this is only
/// the multiplier used in place of the exact subgradient.
pub fn smooth_relu_backward(z: &crate::tensor::Tensor, alpha: f64) -> crate::tensor::Tensor {
    assert!(alpha > 0.0, "alpha must be positive");
    z.map(|v| sigmoid(alpha * v))
}
