use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{primitive}: shape mismatch ({detail})")]
    ShapeMismatch { primitive: String, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("no custom adjoint registered under `{0}`")]
    UnknownAdjoint(String),

    #[error("custom adjoint `{0}` is already registered")]
    DuplicateAdjoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown environment `{name}` (valid: {valid})")]
    UnknownEnvironment { name: String, valid: String },

    #[error("body left the domain at step {step}: position ({x:.3}, {y:.3}), angle {alpha:.3}")]
    OutOfDomain {
        step: usize,
        x: f64,
        y: f64,
        alpha: f64,
    },

    #[error("non-finite loss at iteration {iteration}: {dump}")]
    NonFiniteLoss { iteration: usize, dump: String },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(primitive: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            primitive: primitive.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
