use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{0}: reduction axis is empty")]
    EmptyAxis(&'static str),

    #[error("softmax: row {row} is fully masked")]
    FullyMasked { row: usize },

    #[error("{op}: argument out of domain: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no gradient recorded for node {0} (detached or not requiring grad)")]
    NoGradient(usize),

    #[error("unknown preset '{name}', expected one of: {options}")]
    UnknownPreset { name: String, options: String },

    #[error("resolution {height}x{width} too small: {detail}")]
    Resolution {
        height: usize,
        width: usize,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}
