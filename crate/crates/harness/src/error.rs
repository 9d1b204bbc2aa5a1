use std::path::PathBuf;

use thiserror::Error;

/// Everything a subcommand can fail with. Each variant maps to its own
/// process exit code, see [`HarnessError::exit_code`].
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] dtta_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("malformed result file {path}: {reason}")]
    Results { path: PathBuf, reason: String },

    #[error("no results in {0}")]
    NoResults(PathBuf),

    #[error("replay of {0} produced different bytes")]
    ReplayMismatch(PathBuf),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit codes: 2 is left to argument parsing.
    pub fn exit_code(&self) -> i32 {
        use dtta_core::Error as E;
        match self {
            HarnessError::Config(_) => 3,
            HarnessError::Core(e) => match e {
                E::Shape { .. } => 10,
                E::Domain { .. } => 11,
                E::Contract(_) => 12,
                E::Format { .. } => 13,
                E::PrecisionMismatch { .. } => 14,
                E::UnsupportedSubset { .. } => 15,
                E::NonFinite { .. } => 16,
            },
            HarnessError::Io { .. } => 4,
            HarnessError::Results { .. } => 5,
            HarnessError::NoResults(_) => 6,
            HarnessError::ReplayMismatch(_) => 7,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
