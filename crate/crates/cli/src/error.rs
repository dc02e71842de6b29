use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    /// Curves whose quality ranges do not overlap.
    #[error("range: {0}")]
    Range(String),
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
    #[error(transparent)]
    Core(#[from] ffabic::Error),
}

impl CliError {
    /// Process exit status: 1 for usage mistakes, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(ffabic::Error::Io(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
