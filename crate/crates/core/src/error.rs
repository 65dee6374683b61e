//! Crate-wide error type.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors produced by the numerics, training, and verification layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor/operation shape disagreement. `context` names the operation.
    ShapeMismatch { context: &'static str, detail: String },
    /// A value or gradient became NaN/infinite. `index` is a tape node id,
    /// ODE step, optimizer step, or training round depending on `context`.
    NonFinite { context: &'static str, index: usize },
    /// `backward` was called on a non-scalar node.
    NonScalarOutput { shape: Vec<usize> },
    /// Time embeddings require an even dimension.
    OddEmbedDim { dim: usize },
    /// A time argument fell outside `[0, 1]`.
    TimeOutOfRange { t: f64 },
    /// Transition subsampling with more bins than sampler steps.
    BinsExceedSteps { bins: usize, n_steps: usize },
    /// An operation that needs at least one element got none.
    EmptyBatch { context: &'static str },
    /// Riccati integration exceeded the norm cap before reaching t = 0.
    RiccatiBlowup { t: f64, norm: f64 },
    /// Backtracking line search could not find a decreasing step.
    LineSearchFailed { iter: usize },
    /// Adjoint/forward trajectory grids differ.
    GridMismatch { context: &'static str },
    /// Sample sets of unequal size where equality is required.
    SampleCountMismatch { a: usize, b: usize },
    /// Fewer samples than the estimator needs.
    TooFewSamples { n: usize, need: usize },
    /// A configuration value violated its invariant.
    InvalidConfig { detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, detail } => {
                write!(f, "shape mismatch in {context}: {detail}")
            }
            Error::NonFinite { context, index } => {
                write!(f, "non-finite value in {context} at index {index}")
            }
            Error::NonScalarOutput { shape } => {
                write!(f, "backward requires a scalar output, got shape {shape:?}")
            }
            Error::OddEmbedDim { dim } => {
                write!(f, "time embedding dimension must be even, got {dim}")
            }
            Error::TimeOutOfRange { t } => write!(f, "time {t} outside [0, 1]"),
            Error::BinsExceedSteps { bins, n_steps } => {
                write!(f, "{bins} bins exceed {n_steps} sampler steps")
            }
            Error::EmptyBatch { context } => write!(f, "empty batch in {context}"),
            Error::RiccatiBlowup { t, norm } => {
                write!(f, "Riccati solution blew up at t = {t} (norm {norm:.3e})")
            }
            Error::LineSearchFailed { iter } => {
                write!(f, "line search failed at iteration {iter}")
            }
            Error::GridMismatch { context } => write!(f, "grid mismatch in {context}"),
            Error::SampleCountMismatch { a, b } => {
                write!(f, "sample counts differ: {a} vs {b}")
            }
            Error::TooFewSamples { n, need } => {
                write!(f, "need at least {need} samples, got {n}")
            }
            Error::InvalidConfig { detail } => write!(f, "invalid config: {detail}"),
        }
    }
}

impl core::error::Error for Error {}
