use std::path::PathBuf;

use crate::tensor::DType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs_name} {lhs:?} vs {rhs_name} {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs_name: &'static str,
        lhs: Vec<usize>,
        rhs_name: &'static str,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("dtype mismatch: expected {expected:?}, found {found:?}")]
    DType { expected: DType, found: DType },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("degenerate activation range on edge {edge} ({name})")]
    DegenerateRange { edge: usize, name: String },

    #[error("int32 accumulator overflow in {0}")]
    Overflow(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(
        op: impl Into<String>,
        lhs_name: &'static str,
        lhs: &[usize],
        rhs_name: &'static str,
        rhs: &[usize],
    ) -> Self {
        Error::ShapeMismatch {
            op: op.into(),
            lhs_name,
            lhs: lhs.to_vec(),
            rhs_name,
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or missing input data rather than
    /// bad arguments or numeric failure.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::DType { .. }
        )
    }

    pub fn is_numeric_error(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Overflow(_))
    }
}
