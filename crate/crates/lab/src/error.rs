//! Harness errors, split by exit code: 1 configuration, 2 numerical
//! failure, 3 I/O.

use c2d_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 1,
            LabError::Numeric(_) => 2,
            LabError::Io(_) => 3,
        }
    }

    /// Prefix an error with the pipeline stage it happened in.
    pub fn in_stage(self, stage: &str) -> LabError {
        match self {
            LabError::Config(m) => LabError::Config(format!("stage {stage}: {m}")),
            LabError::Numeric(m) => LabError::Numeric(format!("stage {stage}: {m}")),
            LabError::Io(m) => LabError::Io(format!("stage {stage}: {m}")),
        }
    }
}

impl From<CoreError> for LabError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::InvalidArg(_) => LabError::Config(e.to_string()),
            CoreError::Parse { .. } => LabError::Io(e.to_string()),
            CoreError::ShapeMismatch { .. }
            | CoreError::NonFinite(_)
            | CoreError::Diverged { .. }
            | CoreError::Degenerate(_)
            | CoreError::EmptyLabeledSet { .. } => LabError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}
