//! Error type shared across the crate, with process exit-code mapping for the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DampError>;

#[derive(Debug, Error)]
pub enum DampError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("class {0} has no samples in the provided data")]
    MissingClass(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("corrupted file: {0}")]
    Corruption(String),

    #[error("unsupported format version {found} (reader supports {supported})")]
    Version { found: u32, supported: u32 },

    #[error("retain data contaminated: {0}")]
    Contamination(String),

    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DampError {
    /// CLI exit code: 2 config, 3 data, 4 numeric/invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            DampError::Config(_) | DampError::InvalidArgument(_) => 2,
            DampError::Format(_)
            | DampError::Consistency(_)
            | DampError::Corruption(_)
            | DampError::Version { .. }
            | DampError::MissingClass(_)
            | DampError::InsufficientData(_)
            | DampError::Contamination(_)
            | DampError::Dependency(_)
            | DampError::Io(_) => 3,
            DampError::InvalidState(_) | DampError::DegenerateFeature(_) => 4,
        }
    }
}
