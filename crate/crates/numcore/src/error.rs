use thiserror::Error;

pub type Result<T, E = NumError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// `std::io::Error` is not `Clone`; keep the kind and message.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("io error ({kind:?}): {message}")]
pub struct IoError {
    pub kind: std::io::ErrorKind,
    pub message: String,
}

impl From<std::io::Error> for NumError {
    fn from(e: std::io::Error) -> Self {
        NumError::Io(IoError {
            kind: e.kind(),
            message: e.to_string(),
        })
    }
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumError {
    NumError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
