use std::path::PathBuf;
use thiserror::Error;

use crate::format::FormatError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },
    #[error("missing artifact: expected file {}", .0.display())]
    Missing(PathBuf),
    #[error("bad artifact {}: {source}", path.display())]
    Artifact {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Core(#[from] d2c_core::Error),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Missing(_) => "missing-artifact",
            CliError::Artifact { .. } | CliError::Format(_) => "bad-artifact",
            CliError::Core(d2c_core::Error::NonFinite(_)) => "numeric",
            CliError::Core(_) => "invalid",
            CliError::Io { .. } => "io",
        }
    }

    /// 0 success, 2 config, 3 missing or unreadable artifact, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Core(_) => {
                if matches!(self, CliError::Core(d2c_core::Error::NonFinite(_))) {
                    4
                } else {
                    2
                }
            }
            CliError::Missing(_) | CliError::Artifact { .. } | CliError::Format(_) | CliError::Io { .. } => 3,
        }
    }

    /// Single line: `error kind=<kind> code=<n> message=<json string>`.
    pub fn machine_line(&self) -> String {
        format!(
            "error kind={} code={} message={}",
            self.kind(),
            self.exit_code(),
            serde_json::to_string(&self.to_string()).expect("string serializes")
        )
    }
}
