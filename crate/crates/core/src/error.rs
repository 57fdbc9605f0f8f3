use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A forward op produced NaN or an infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Argument outside the function's domain (e.g. lgamma at x <= 0).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error at line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint does not match the configuration it is loaded against.
    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("numeric failure at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
