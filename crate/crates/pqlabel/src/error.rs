use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] pqlabel_core::Error),
    /// An input file could not be read.
    #[error("cannot read {}: {source}", path.display())]
    Input { path: PathBuf, source: std::io::Error },
    /// An output could not be written.
    #[error("cannot write {}: {source}", path.display())]
    Output { path: PathBuf, source: std::io::Error },
    /// Malformed input file contents.
    #[error("{origin}: {message}")]
    Format { origin: String, message: String },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Context { context: String, source: Box<Error> },
}

impl Error {
    pub fn format(origin: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format { origin: origin.into(), message: message.into() }
    }

    pub fn input(path: &Path, source: std::io::Error) -> Self {
        Error::Input { path: path.to_owned(), source }
    }

    pub fn output(path: &Path, source: std::io::Error) -> Self {
        Error::Output { path: path.to_owned(), source }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// Innermost error, skipping context layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// 1 for problems with the inputs or configuration, 2 for failures
    /// while running or writing results.
    pub fn exit_code(&self) -> u8 {
        match self.root() {
            Error::Core(e) if e.is_user_error() => 1,
            Error::Core(_) | Error::Output { .. } => 2,
            _ => 1,
        }
    }
}

pub trait ResultExt<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T, E: Into<Error>> ResultExt<T> for std::result::Result<T, E> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.into().context(context()))
    }
}
