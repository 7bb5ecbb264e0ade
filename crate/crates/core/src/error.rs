use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Input violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Parameter combination that cannot produce a meaningful result.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// A statistic is undefined for the input (constant image, one-sided data).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

impl Error {
    /// Prefixes the message with `context`, keeping the variant.
    pub fn context(self, context: &str) -> Self {
        use alloc::format;
        match self {
            Error::Validation(m) => Error::Validation(format!("{context}: {m}")),
            Error::Configuration(m) => Error::Configuration(format!("{context}: {m}")),
            Error::Degenerate(m) => Error::Degenerate(format!("{context}: {m}")),
            other => other,
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// numerical failure during a run.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Configuration(_) | Error::InsufficientData { .. }
        )
    }
}
