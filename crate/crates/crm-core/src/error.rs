//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. The variants
//! are intentionally coarse: callers usually either bubble the error up to
//! the CLI or assert on it in tests, so what matters is that the message
//! carries enough context (names, shapes, file positions) to act on.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    /// A computation produced NaN or infinity where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A configuration value is missing, out of range, or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// A text artifact (event log, metadata file) failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// An id referenced a row outside the table it indexes.
    #[error("{kind} id {id} out of bounds (valid range 1..={max})")]
    IdOutOfBounds { kind: String, id: u32, max: u32 },

    /// An operation that needs at least one interaction got none.
    #[error("empty history: {0}")]
    EmptyHistory(String),

    /// A sequence does not fit the model's positional table.
    #[error("sequence of {got} events exceeds the maximum context of {max}")]
    ContextOverflow { got: usize, max: usize },

    /// A retrieval request asked for more neighbors than exist.
    #[error("requested k={k} but the index holds only {available} items")]
    KMismatch { k: usize, available: usize },

    /// Filesystem failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A checkpoint file is truncated, has a bad magic, or is internally
    /// inconsistent.
    #[error("bad checkpoint {path}: {msg}")]
    CheckpointFormat { path: PathBuf, msg: String },

    /// Training aborted because the loss left the finite range.
    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Diverged {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    /// A pipeline stage failed; wraps the underlying error so the run
    /// status can name the stage.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attach a pipeline stage name to an error.
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// Shorthand for [`Error::Io`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Shorthand for [`Error::Shape`].
    pub fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
