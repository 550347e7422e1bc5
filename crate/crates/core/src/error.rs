//! Error types shared across the workspace.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unbound leaf node {0}")]
    UnboundLeaf(usize),
    #[error("gradient root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("node {0} is not part of this tape")]
    UnknownNode(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model is not homogeneous: {0}")]
    NotHomogeneous(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("arity mismatch: {0}")]
    ArityMismatch(String),
    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("reconstruction diverged at iteration {iter} (loss = {loss})")]
    ReconstructionDiverged { iter: usize, loss: f64 },
    #[error("stationarity residual undefined: {0}")]
    UndefinedStationarity(String),
    #[error("zero-variance input to normalized distance")]
    DegenerateVariance,
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
