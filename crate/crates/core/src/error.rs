use std::fmt;
use std::path::PathBuf;

use serde::Serialize;

use crate::model::Violation;

pub type Result<T> = std::result::Result<T, Error>;

/// How a failed model call should be treated by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientErrorKind {
    /// Transient failure (timeout, 429, 5xx) that was not retried further.
    Retryable,
    /// Non-retryable failure (4xx other than 429, bad auth, ...).
    Fatal,
    /// A retryable failure that persisted through every allowed attempt.
    FatalAfterRetry,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientError {
    pub endpoint_id: String,
    pub kind: ClientErrorKind,
    pub attempts: u32,
    pub message: String,
}

impl fmt::Display for ClientError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "endpoint {} failed ({:?}, {} attempt(s)): {}",
            self.endpoint_id, self.kind, self.attempts, self.message
        )
    }
}

impl std::error::Error for ClientError {}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate box (w={w}, h={h})")]
    DegenerateBox { w: f64, h: f64 },

    #[error("degenerate boxes at detection indices {indices:?}")]
    DegenerateDetections { indices: Vec<usize> },

    #[error("invariant violation in {record}: {}", join_violations(.violations))]
    InvariantViolation {
        record: String,
        violations: Vec<Violation>,
    },

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("duplicate image id {0}")]
    IdCollision(u64),

    #[error("unknown detection source `{0}`")]
    UnknownSource(String),

    #[error("category name is empty")]
    EmptyCategory,

    #[error("annotation bundle has no objects and no captions")]
    EmptyBundle,

    #[error("stage violation: {0}")]
    StageViolation(String),

    #[error(transparent)]
    Client(#[from] ClientError),

    #[error("malformed response from {endpoint_id}: {message}")]
    MalformedResponse {
        endpoint_id: String,
        message: String,
    },

    #[error("empty response from {0}")]
    EmptyResponse(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint config hash {found} does not match live config hash {expected}")]
    CheckpointMismatch { expected: String, found: String },

    #[error("run interrupted after {batches} batch(es)")]
    Interrupted { batches: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateBox { .. } => "degenerate_box",
            Error::DegenerateDetections { .. } => "degenerate_box",
            Error::InvariantViolation { .. } => "invariant_violation",
            Error::Schema { .. } => "schema_error",
            Error::IdCollision(_) => "id_collision",
            Error::UnknownSource(_) => "unknown_source",
            Error::EmptyCategory => "empty_category",
            Error::EmptyBundle => "empty_bundle",
            Error::StageViolation(_) => "stage_violation",
            Error::Client(_) => "client_error",
            Error::MalformedResponse { .. } => "malformed_response",
            Error::EmptyResponse(_) => "empty_response",
            Error::Config(_) => "config_error",
            Error::CheckpointMismatch { .. } => "checkpoint_mismatch",
            Error::Interrupted { .. } => "interrupted",
            Error::Io { .. } => "io_error",
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
