use std::path::PathBuf;

use qbattery_core::Error as CoreError;

pub type Result<T> = std::result::Result<T, RunError>;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl RunError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RunError::Io { path: path.into(), source }
    }

    pub fn checkpoint(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        RunError::Checkpoint { path: path.into(), reason: reason.into() }
    }

    /// Process exit status: 2 for configuration problems, 3 for numerical
    /// aborts, 4 for checkpoint incompatibility, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Core(e) if e.is_numerical() => 3,
            RunError::Core(
                CoreError::InvalidSpin(_)
                | CoreError::InvalidConfig(_)
                | CoreError::InvalidSchedule(_)
                | CoreError::PureStateWithDissipation(_)
                | CoreError::StepExceedsSegment { .. }
                | CoreError::InvalidArgument(_),
            ) => 2,
            RunError::Checkpoint { .. } => 4,
            _ => 1,
        }
    }
}
