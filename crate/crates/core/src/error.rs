use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("target mask is not binary: value {value} at flat index {index}")]
    NonBinaryTarget { index: usize, value: f64 },

    #[error("class index {class} out of range (K = {num_classes}) at pixel (n={n}, y={y}, x={x})")]
    ClassOutOfRange {
        class: u8,
        num_classes: usize,
        n: usize,
        y: usize,
        x: usize,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("too few classes: side {side} has {present} non-background classes, need at least 2")]
    TooFewClasses { side: usize, present: usize },

    #[error("class {class} has no entry in the class mapping")]
    UnmappedClass { class: u8 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: malformed data at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: usize,
        detail: String,
    },

    #[error("checkpoint mismatch: expected {expected}, found {found}")]
    CheckpointMismatch { expected: String, found: String },

    #[error("training diverged at iteration {iteration} (last good checkpoint: {last_checkpoint:?})")]
    Diverged {
        iteration: usize,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("no evaluable classes: every IoU denominator is zero")]
    NoEvaluableClasses,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or inconsistent input data rather
    /// than by numerics or programming mistakes.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::Io { .. }
                | Error::UnmappedClass { .. }
                | Error::TooFewClasses { .. }
                | Error::CheckpointMismatch { .. }
                | Error::ClassOutOfRange { .. }
                | Error::NonBinaryTarget { .. }
        )
    }

    pub fn is_numerical_failure(&self) -> bool {
        matches!(self, Error::Diverged { .. } | Error::NonFiniteGradient { .. })
    }
}
