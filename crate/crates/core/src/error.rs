use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("dataset has {0} usable examples, need at least 2")]
    EmptyDataset(usize),

    #[error(
        "matrix is singular beyond the jitter ceiling {jitter:.3e}; most correlated inputs are \
         {i} and {j} (|corr| = {correlation:.12})"
    )]
    Singular {
        jitter: f64,
        i: usize,
        j: usize,
        correlation: f64,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// True for errors caused by the data rather than by arguments or numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::Consistency(_) | Error::EmptyDataset(_) | Error::Io(_)
        )
    }

    pub fn is_numeric_error(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Singular { .. })
    }
}
