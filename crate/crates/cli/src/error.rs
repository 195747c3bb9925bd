use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] crisisgraph::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Core(crisisgraph::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Process exit status: 1 usage, 2 data or format, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(crisisgraph::Error::NonFinite(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}
