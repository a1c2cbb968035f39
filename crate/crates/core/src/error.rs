//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max}): {reason}")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        reason: &'static str,
    },

    #[error("GIoU is undefined when both boxes are degenerate")]
    DegenerateGiou,

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid term set for category {category_id}: {reason}")]
    InvalidTerms { category_id: u64, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("protocol error ({kind}): {message}")]
    Protocol { kind: String, message: String },

    #[error("transport error after {attempts} attempt(s) (retryable: {retryable}): {message}")]
    Transport {
        message: String,
        retryable: bool,
        attempts: u32,
    },

    #[error("detector error ({kind}): {message}")]
    Adapter { kind: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("pseudo-label generation stopped after {completed} of {total} request groups: {source}")]
    PartialBatch {
        completed: usize,
        total: usize,
        labels: Vec<crate::dataset::GroundTruthBox>,
        #[source]
        source: Box<Error>,
    },

    #[error("iteration loop aborted after iteration {iteration}: {source}")]
    LoopAborted {
        iteration: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("category {category_id}: {source}")]
    InCategory {
        category_id: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub fn protocol(kind: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Protocol {
            kind: kind.into(),
            message: message.into(),
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidTerms { .. } => 2,
            Error::Protocol { .. }
            | Error::Transport { .. }
            | Error::Adapter { .. }
            | Error::PartialBatch { .. } => 3,
            Error::Integrity(_) | Error::Parse { .. } | Error::InvalidBox { .. } => 4,
            Error::InCategory { source, .. } | Error::LoopAborted { source, .. } => {
                source.exit_code()
            }
            _ => 1,
        }
    }
}
