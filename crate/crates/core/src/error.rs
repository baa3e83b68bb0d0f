//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// An argument lies outside the domain the operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an operation contract (wrong tape, non-scalar loss, bad horizon).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input files are structurally incomplete (missing regions, dates, columns).
    #[error("ingestion error: {0}")]
    Ingest(String),

    /// Input values violate a data invariant (negative counts, bad population).
    #[error("validation error: {0}")]
    Validation(String),

    /// Scenario file does not follow the documented schema.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A gradient contained NaN or infinity.
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    /// Training produced a NaN loss. Carries the last checkpoint whose loss was finite.
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        last_good: Option<Box<crate::checkpoint::Checkpoint>>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Domain(_)
                | Error::Contract(_)
                | Error::Ingest(_)
                | Error::Validation(_)
                | Error::Parse { .. }
                | Error::Shape { .. }
        )
    }
}
