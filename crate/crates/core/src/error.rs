use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error in frame {frame}: expected {expected} keypoints, found {found}")]
    Schema {
        frame: usize,
        expected: usize,
        found: usize,
    },

    #[error("ordering error: frame index {current} does not follow {previous}")]
    Ordering { previous: u64, current: u64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("joint {joint} has no observation above the confidence threshold")]
    UnusableJoint { joint: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index {index} out of range for {len} joints")]
    JointIndex { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("corrupt checkpoint manifest: {0}")]
    CorruptManifest(String),

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("model: {0}")]
    Model(String),

    #[error("training: {0}")]
    Training(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("at truncation level {level}: {source}")]
    AtLevel { level: usize, source: Box<Error> },

    #[error("repeat {repeat}, fold {fold}: {source}")]
    AtFold {
        repeat: usize,
        fold: usize,
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    File { path: PathBuf, source: Box<Error> },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse error families, used by the CLI to choose an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFinite { .. }
            | Error::Autodiff(_)
            | Error::Training(_)
            | Error::UndefinedMetric(_) => ErrorClass::Numeric,
            Error::AtLevel { source, .. }
            | Error::AtFold { source, .. }
            | Error::File { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
