use thiserror::Error;

/// Errors raised by the walk generators, the model and the training loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    /// `e_y^T f + eps` must stay positive for the log-loss to be defined.
    #[error("loss domain violation: e_y^T f + eps = {value:e} for label {label}")]
    LossDomain { value: f64, label: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("example {index}: {source}")]
    Example { index: usize, source: Box<Error> },

    #[error("iteration {iteration}: {source}")]
    Iteration { iteration: usize, source: Box<Error> },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_example(self, index: usize) -> Self {
        Error::Example { index, source: Box::new(self) }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::Iteration { iteration, source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
