use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are split so callers (the CLI in particular) can distinguish
/// configuration/validation failures from runtime failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration values (e.g. `n < K`, zero margin).
    #[error("configuration error: {0}")]
    Config(String),

    /// Structural validation failure; the message names the offending id.
    #[error("validation error: {0}")]
    Validation(String),

    /// A node id that does not exist in the dataset.
    #[error("unknown node id {id} (dataset has {n} nodes)")]
    UnknownNode { id: u32, n: usize },

    /// Feature row with NaN or infinite entries.
    #[error("non-finite value in feature row {row}")]
    NonFiniteRow { row: usize },

    /// Feature row with (near-)zero Euclidean norm; cosine distance is
    /// undefined for it.
    #[error("zero-norm feature row {row}")]
    ZeroNormRow { row: usize },

    /// Vector with norm below the epsilon floor passed to cosine distance.
    #[error("zero-norm vector in cosine distance")]
    ZeroVector,

    /// Dimension disagreement between two inputs.
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    /// Malformed line in a JSON-lines file.
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Malformed binary file (bad magic, truncation, ...).
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training aborted because a batch produced a non-finite loss.
    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration rather than by
    /// the environment. The CLI maps these to exit code 1, the rest to 2.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::NonFiniteLoss { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
