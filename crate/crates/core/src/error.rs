use std::path::PathBuf;

use thiserror::Error;

use crate::metrics::GaussFit1D;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two grids that must share a shape do not.
    #[error("dimension mismatch in {what}: {left_w}x{left_h} vs {right_w}x{right_h}")]
    DimensionMismatch {
        what: &'static str,
        left_w: usize,
        left_h: usize,
        right_w: usize,
        right_h: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },

    #[error("segmentation failed: {0}; skip enhancement for this image")]
    Segmentation(String),

    #[error("gray transform parameters rejected: {0}")]
    Parameter(String),

    #[error("unit error: {0}")]
    Unit(String),

    #[error("gaussian fit failed: {reason}")]
    Fit { reason: String, partial: Box<GaussFit1D> },

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// The innermost error, with all stage context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Attaches a pipeline stage name to an error.
pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}

/// Wall-clock seconds spent in each named pipeline stage, in run order.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct StageTimings(pub Vec<(String, f64)>);

impl StageTimings {
    /// Runs `f`, records its duration under `stage` and attaches the stage
    /// name to any error.
    pub fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = std::time::Instant::now();
        let out = f().stage(stage);
        self.0.push((stage.to_string(), start.elapsed().as_secs_f64()));
        out
    }

    pub fn extend(&mut self, other: &StageTimings) {
        self.0.extend(other.0.iter().cloned());
    }
}
