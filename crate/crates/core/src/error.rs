use std::path::PathBuf;

use thiserror::Error;

use crate::foreground::ForegroundMask;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),

    #[error("token index {index} outside codebook of size {size}")]
    Token { index: usize, size: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid tiling: {0}")]
    InvalidTiling(String),

    /// Histogram has no class separation; carries the all-background mask.
    #[error("degenerate histogram: no threshold separates the intensities")]
    DegenerateHistogram(Box<ForegroundMask>),

    #[error("no ROI position satisfies the foreground constraint")]
    NoForeground,

    #[error("degenerate sample: all paired differences are zero")]
    DegenerateSample,

    #[error("training diverged at step {step}")]
    TrainingDiverged {
        step: u64,
        last_good: Box<crate::model::Checkpoint>,
    },

    #[error("synthetic slide generation failed: {0}")]
    Generation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
