use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("invalid value: {0}")]
    Validation(String),

    /// The entry was evicted between sampling and update. Callers tolerate this.
    #[error("stale buffer entry {0}")]
    StaleEntry(u64),

    #[error("replay buffer not ready: {0}")]
    NotReady(&'static str),

    #[error("non-finite value in {location}")]
    Numerical { location: String },

    #[error("non-finite value at step {step} in {location}")]
    NumericalAtStep { step: u64, location: String },

    #[error("least-squares fit failed: {0}")]
    Fit(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_stale(&self) -> bool {
        matches!(self, Error::StaleEntry(_))
    }
}

pub(crate) fn ensure_weight(w: f64) -> Result<()> {
    if w.is_finite() && w >= 0.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "weight must be finite and nonnegative, got {w}"
        )))
    }
}
