//! Crate-wide error type.
//!
//! Variants map onto the CLI exit-code classes: configuration and flag
//! problems are usage errors, file and format problems are data errors, and
//! non-finite values or failed gradient checks are numeric errors.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up for a primitive.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// Invalid configuration value or inconsistent geometry.
    #[error("invalid config: {0}")]
    Config(String),

    /// Vocabulary construction or lookup problem.
    #[error("vocab error: {0}")]
    Vocab(String),

    /// Malformed or inconsistent task data.
    #[error("data error: {0}")]
    Data(String),

    /// I/O with path context.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("checkpoint {path}: bad magic (not a checkpoint file)")]
    CheckpointBadMagic { path: PathBuf },

    /// Checkpoint version is not supported by this build.
    #[error("checkpoint {path}: unsupported version {found} (expected {expected})")]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    /// Checkpoint payload is shorter than its manifest promises.
    #[error("checkpoint {path}: truncated payload ({details})")]
    CheckpointTruncated { path: PathBuf, details: String },

    /// Malformed checkpoint header or manifest.
    #[error("checkpoint {path}: {details}")]
    CheckpointHeader { path: PathBuf, details: String },

    /// A gradient or loss stopped being finite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Gradient check exceeded its tolerance.
    #[error("gradient check failed: max relative error {max_rel_err:e} > {tolerance:e}")]
    GradCheck { max_rel_err: f64, tolerance: f64 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit-code class for this error (1 usage, 2 data, 3 numeric).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFinite(_) | Error::GradCheck { .. } => 3,
            _ => 2,
        }
    }
}
