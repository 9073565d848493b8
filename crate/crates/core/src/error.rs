use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = M2dError> = std::result::Result<T, E>;

/// Every failure the library reports. The CLI maps each variant onto a
/// process exit code through [`M2dError::exit_code`].
#[derive(Debug, Error)]
pub enum M2dError {
    #[error("input too short: need at least {needed} samples, got {got}")]
    InputTooShort { needed: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("cannot tile {axis} axis: {len} is not divisible by patch size {patch}")]
    Tiling {
        axis: &'static str,
        len: usize,
        patch: usize,
    },

    #[error("inconsistent state: {0}")]
    Consistency(String),

    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("frame alignment failed: {0}")]
    Alignment(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("failed to load checkpoint: {0}")]
    Load(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl M2dError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        M2dError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        M2dError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 2 config error, 3 data error, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            M2dError::Config { .. } | M2dError::Tiling { .. } => 2,
            M2dError::Divergence { .. } => 4,
            _ => 3,
        }
    }
}
