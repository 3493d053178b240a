use thiserror::Error;

use tad_core::TadError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        path: String,
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unsupported state format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u64, supported: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid usage: {0}")]
    Usage(String),

    #[error("no observations are pending for this campaign")]
    NoPendingBatch,

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Campaign(#[from] TadError),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) | Self::NoPendingBatch => 64,
            Self::Parse { .. } | Self::UnsupportedVersion { .. } | Self::Csv(_) => 65,
            Self::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 66,
            Self::Io { .. } => 74,
            Self::Config(_) => 78,
            Self::Campaign(TadError::ContractViolation(_) | TadError::DimensionMismatch { .. }) => {
                65
            }
            Self::Campaign(TadError::AlreadyTerminated(_)) => 64,
            Self::Campaign(_) => 70,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
