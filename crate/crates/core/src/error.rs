use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PamfnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PamfnError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("{modality} features have width {found}, expected {expected}")]
    DimensionMismatch {
        modality: String,
        expected: usize,
        found: usize,
    },

    #[error("modalities are not time-aligned: rgb T={rgb}, flow T={flow}, audio T={audio}")]
    Alignment { rgb: usize, flow: usize, audio: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown video id `{0}`")]
    UnknownVideo(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
}

impl PamfnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::Validation(_) | Self::DimensionMismatch { .. }
        )
    }
}
