use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("duplicate judgment for query `{query}` item `{item}`")]
    DuplicateQrel { query: String, item: String },

    #[error("unknown relevance label `{0}` (expected one of E, S, C, I)")]
    UnknownLabel(String),

    #[error("aspect `{0}` is not part of the schema")]
    UnknownAspect(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("position {position} out of range for sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("vocabulary fingerprint mismatch: checkpoint has {expected}, active vocabulary has {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("value `{value}` is not in the class vocabulary of aspect `{aspect}`")]
    UnknownAspectValue { aspect: String, value: String },

    #[error("loss became non-finite at step {step} (components: {components})")]
    Diverged { step: usize, components: String },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable snake_case name of the variant, for machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::DuplicateId(_) => "duplicate_id",
            Error::DuplicateQrel { .. } => "duplicate_qrel",
            Error::UnknownLabel(_) => "unknown_label",
            Error::UnknownAspect(_) => "unknown_aspect",
            Error::Schema(_) => "schema",
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::PositionOutOfRange { .. } => "position_out_of_range",
            Error::FingerprintMismatch { .. } => "fingerprint_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::UnknownAspectValue { .. } => "unknown_aspect_value",
            Error::Diverged { .. } => "diverged",
            Error::Invalid(_) => "invalid",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
