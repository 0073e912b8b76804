//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Errors produced by tensor I/O, the numeric kernels, and the allocator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid npy file {path}: {reason}")]
    Npy { path: PathBuf, reason: String },

    #[error("non-finite element at flat index {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    #[error("matrix not positive definite (pivot {pivot} failed; increase damp or add calibration data)")]
    NotPositiveDefinite { pivot: usize },

    #[error("numerical breakdown: pivot {pivot:e} at index {index} below threshold {threshold:e}")]
    NumericalBreakdown {
        index: usize,
        pivot: f64,
        threshold: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("budget {budget} infeasible: cheapest assignment costs {min_cost}")]
    InfeasibleBudget { budget: f64, min_cost: f64 },

    #[error("layer {layer} has no level labelled {label:?}")]
    MissingLevel { layer: String, label: String },

    #[error("enumeration limit exceeded: {0} candidates (max {1})")]
    EnumerationLimit(u128, u64),

    #[error("invalid json in {path}: {reason}")]
    Json { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn npy(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Npy {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(context: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
