use std::path::{Path, PathBuf};

/// Failures that end a command. Check failures and divergence are reported
/// through [`crate::Outcome`] instead.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] primal_attention::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } => 2,
            CliError::Core(primal_attention::Error::Config(_) | primal_attention::Error::Parse(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}
