use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box {0:?}: width and height must be positive and finite")]
    InvalidBox([f64; 4]),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("probability {prob} for labeled class {class} of RoI {roi} is outside (0, 1]")]
    InvalidProbability { roi: usize, class: usize, prob: f64 },

    #[error("no path: processed frame {frame} has no detections")]
    NoPath { frame: usize },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidBox(_) => "invalid_box",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidProbability { .. } => "invalid_probability",
            Error::NoPath { .. } => "no_path",
            Error::Format { .. } => "format",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Divergence { .. } => "divergence",
            Error::NonFinite(_) => "non_finite",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
