//! Plumbing behind the `r2n2` binary: config resolution, artifact output
//! and SVG plots.

pub mod config;
pub mod output;
pub mod plot;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("plot error: {0}")]
    Plot(String),
    #[error(transparent)]
    Core(#[from] r2n2::Error),
}

impl CliError {
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 3 for anything the user can fix in the config or
    /// invocation, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Io { .. } => 3,
            Self::Core(r2n2::Error::Invalid(_) | r2n2::Error::UnknownMatrix(_) | r2n2::Error::Serde(_)) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
