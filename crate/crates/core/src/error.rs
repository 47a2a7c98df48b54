use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid keep set: {0}")]
    InvalidKeepSet(String),

    #[error("invalid block library: {0}")]
    InvalidLibrary(String),

    #[error("variant `{variant}` not in library for layer {layer}")]
    UnknownVariant { layer: usize, variant: String },

    #[error("probe set is empty")]
    EmptyProbes,

    #[error("malformed task sequence {index}: {reason}")]
    MalformedTask { index: usize, reason: String },

    #[error("ragged sample counts: {0}")]
    RaggedSamples(String),

    #[error("missing score for layer {layer} variant `{variant}` ({signal})")]
    MissingScore { layer: usize, variant: String, signal: String },

    #[error("missing cost for layer {layer} variant `{variant}` in scenario `{scenario}`")]
    MissingCost { layer: usize, variant: String, scenario: String },

    #[error("{path}:{line}: cost schema violation: {reason}")]
    CostSchema { path: PathBuf, line: usize, reason: String },

    #[error("malformed selection problem: {0}")]
    MalformedProblem(String),

    #[error("instance too large for exhaustive search ({0} combinations)")]
    InstanceTooLarge(u128),

    #[error("infeasible: binding constraint {binding}")]
    Infeasible { binding: String },

    #[error("nonpositive value: {0}")]
    NonPositive(String),

    #[error("missing scales for layer {0}")]
    MissingScales(usize),

    #[error("baseline `{0}` not present in records")]
    MissingBaseline(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("run directory {0} is locked by another stage")]
    Locked(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True when the root cause is an infeasible selection problem.
    pub fn is_infeasible(&self) -> bool {
        match self {
            Error::Infeasible { .. } => true,
            Error::Stage { source, .. } => source.is_infeasible(),
            _ => false,
        }
    }
}
