use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Schema(String),

    #[error("canvas mismatch: {0}")]
    Canvas(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid keypoints: {0}")]
    InvalidKeypoints(String),

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("unsupported backend: {0}")]
    UnsupportedBackend(String),

    #[error("unsupported aligner: {0}")]
    UnsupportedAligner(String),

    #[error("segmentation failed: {0}")]
    Segmenter(String),

    #[error("non-finite loss in {stage} at iteration {iter}: {detail}")]
    NumericalFailure { stage: String, iter: usize, detail: String },

    #[error("input error for {path}: {reason}")]
    Input { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn input(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Input {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(other),
            },
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for the CLI: 2 input problems, 3 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::NumericalFailure { .. } => 3,
            Error::Input { .. }
            | Error::Config(_)
            | Error::InvalidKeypoints(_)
            | Error::Canvas(_)
            | Error::Schema(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Image(_)
            | Error::UnsupportedBackend(_)
            | Error::UnsupportedAligner(_) => 2,
            _ => 1,
        }
    }
}
