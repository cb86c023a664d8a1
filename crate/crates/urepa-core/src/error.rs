use thiserror::Error;

/// Errors surfaced by fallible public operations.
///
/// `Config` and `Format` describe bad user input (rejectable up front);
/// `NonFinite` and `Verification` describe runtime failures that indicate a
/// diverged computation or a broken invariant.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("verification failure: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True when the error reflects bad input rather than an internal failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::ShapeMismatch(_) | Error::OutOfRange(_) | Error::Format(_)
        )
    }
}
