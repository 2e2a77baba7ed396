use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A bundle file is malformed. `line` is 1-based when known.
    #[error("{}{}: {msg}", file.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Bundle {
        file: PathBuf,
        line: Option<usize>,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("template: {0}")]
    Template(String),

    #[error("parameter file: {0}")]
    ParamFormat(String),

    #[error(transparent)]
    Scorer(#[from] ScorerError),

    #[error("feedback coverage {scored}/{total} below floor {floor}")]
    Coverage {
        scored: usize,
        total: usize,
        floor: f64,
    },

    #[error("training aborted at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn bundle(file: impl Into<PathBuf>, line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Bundle {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

/// Failures reported by a scoring backend.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ScorerError {
    #[error("transport failed after {attempts} attempts: {msg}")]
    Transport { attempts: usize, msg: String },

    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },

    #[error("response carries no token log-probabilities")]
    NoLogprobs,

    #[error("token boundary at char {boundary} cannot be aligned (token at {offset}, {len} chars)")]
    Misaligned {
        boundary: usize,
        offset: usize,
        len: usize,
    },

    #[error("malformed response: {0}")]
    BadResponse(String),

    #[error("empty continuation")]
    EmptyContinuation,
}
