use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("graph integrity: {0}")]
    GraphIntegrity(String),

    #[error("non-finite value {value} at input {input}, coordinate {index}")]
    NumericalInstability {
        input: usize,
        index: usize,
        value: f64,
    },

    #[error("invalid data at (row {row}, col {col}): {msg}")]
    Data { msg: String, row: usize, col: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter registry error: {0}")]
    Registry(String),

    #[error("evaluation over zero pixels")]
    EmptyEvaluation,

    #[error("loss became NaN at iteration {iteration} (last finite loss {last_finite})")]
    NanLoss { iteration: u64, last_finite: f64 },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::DimensionMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
