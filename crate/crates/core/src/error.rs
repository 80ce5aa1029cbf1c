use thiserror::Error;

/// Coarse failure classes, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum TplError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("graph: {0}")]
    Graph(String),
    #[error("{what}: {detail}")]
    Format { what: String, detail: String },
    #[error("{what} truncated: expected {expected} bytes, found {actual}")]
    Truncated {
        what: String,
        expected: usize,
        actual: usize,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl TplError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            TplError::InvalidArgument(_) => ErrorKind::Usage,
            TplError::Format { .. }
            | TplError::Truncated { .. }
            | TplError::Io(_)
            | TplError::Json(_) => ErrorKind::Data,
            TplError::ShapeMismatch { .. }
            | TplError::NonFinite { .. }
            | TplError::Graph(_)
            | TplError::Numerical(_)
            | TplError::Diverged { .. } => ErrorKind::Numerical,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        TplError::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        TplError::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TplError>;
