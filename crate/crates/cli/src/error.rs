use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {msg}")]
    Config { path: String, msg: String },

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Data {
        path: PathBuf,
        #[source]
        source: sysid::Error,
    },

    #[error(transparent)]
    Core(#[from] sysid::Error),
}

impl CliError {
    /// Schema violation at a dotted key path.
    pub fn schema(key: &str, msg: String) -> Self {
        CliError::Config { path: key.to_string(), msg }
    }

    pub fn file(path: &Path, source: std::io::Error) -> Self {
        CliError::File { path: path.to_path_buf(), source }
    }

    pub fn data(path: &Path, source: sysid::Error) -> Self {
        match source {
            sysid::Error::Io(e) => CliError::file(path, e),
            other => CliError::Data { path: path.to_path_buf(), source: other },
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::File { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "missing-file",
            CliError::File { .. } => "io",
            CliError::Data { source, .. } | CliError::Core(source) => source.category(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }
}
