//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not line up for the attempted operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A vector with zero norm reached an operation that needs a direction.
    /// Zero embeddings signal an upstream bug, so this is never silently 0.
    #[error("zero-norm vector in {0}")]
    ZeroNorm(String),

    /// An operation that needs data received none.
    #[error("empty input: {0}")]
    Empty(String),

    /// A batch of fewer than two rows reached the diversity loss, whose
    /// off-diagonal sum is empty for a single row.
    #[error("diversity loss needs a batch of at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    /// Invalid configuration or argument values.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed binary file; reports the byte offset and the field being read.
    #[error("malformed file at byte {offset}, field `{field}`: {detail}")]
    Format {
        offset: usize,
        field: &'static str,
        detail: String,
    },

    /// Malformed CSV input.
    #[error("malformed csv at line {line}: {detail}")]
    Csv { line: usize, detail: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A non-finite value appeared during training; runs abort immediately.
    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    /// The numerical simplex maximizer failed its convergence check.
    #[error("simplex optimizer did not converge: final objective change {0:.3e}")]
    NotConverged(f64),

    /// The cooldown rule left fewer eligible clients than requested.
    #[error(
        "only {eligible} clients are outside the {window}-round cooldown window, \
         but {requested} were requested"
    )]
    Cooldown {
        eligible: usize,
        requested: usize,
        window: u32,
    },

    /// An enhancement was enabled without providing client indices.
    #[error("enhancements are enabled but no client indices were provided")]
    MissingIndices,
}

impl Error {
    /// Process exit code for the CLI: 2 for usage/config/file problems,
    /// 3 for runtime numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
