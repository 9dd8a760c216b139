use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any trainable input")]
    DetachedLoss,

    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardTwice,

    #[error("codebook is empty")]
    EmptyCodebook,

    #[error("degenerate input: norm {norm:e} below {eps:e}")]
    Degenerate { norm: f64, eps: f64 },

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("unsupported sample format: {0}")]
    UnsupportedFormat(String),

    #[error("unsupported channel count: {0}")]
    UnsupportedChannels(u16),

    #[error("input too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("malformed {kind} data: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }
}
