//! Error type shared across the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, CoreError>;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// A caller-supplied argument violated a precondition.
    InvalidArg(String),
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A forward pass or gradient produced NaN/Inf.
    NonFinite(&'static str),
    /// A training loop produced a non-finite loss at the given epoch.
    Diverged { stage: &'static str, epoch: usize },
    /// Input carries no usable signal (e.g. all loss values identical).
    Degenerate(String),
    /// The clean/noisy split produced an empty labeled set.
    EmptyLabeledSet { tau: f64 },
    /// A serialized dataset, checkpoint, or log could not be decoded.
    Parse { line: usize, msg: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::InvalidArg(msg) => write!(f, "invalid argument: {msg}"),
            CoreError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            CoreError::NonFinite(what) => write!(f, "non-finite values in {what}"),
            CoreError::Diverged { stage, epoch } => {
                write!(f, "{stage} diverged (non-finite loss) at epoch {epoch}")
            }
            CoreError::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
            CoreError::EmptyLabeledSet { tau } => write!(
                f,
                "labeled set is empty at tau={tau}; lower the threshold"
            ),
            CoreError::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub(crate) fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::InvalidArg(msg.into())
}
