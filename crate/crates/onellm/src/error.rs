use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] onellm_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    /// Not a file of the expected kind.
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("{}: unsupported version {found} (expected {expected})", path.display())]
    UnsupportedVersion { path: PathBuf, found: u32, expected: u32 },
    #[error("{}: file ends early ({detail})", path.display())]
    Truncated { path: PathBuf, detail: String },
    #[error("{}: integrity hash mismatch{}", path.display(), item.map(|i| format!(" in item {i}")).unwrap_or_default())]
    HashMismatch { path: PathBuf, item: Option<usize> },
    #[error("{}: parameter `{name}` {detail}", path.display())]
    Parameter { path: PathBuf, name: String, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Precondition(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 configuration, 3 precondition, 4 numerical
    /// abort, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Core(onellm_core::Error::Config(_) | onellm_core::Error::Argument(_)) => 2,
            Error::Precondition(_) => 3,
            Error::Core(onellm_core::Error::NumericalAbort { .. }) => 4,
            _ => 1,
        }
    }
}
