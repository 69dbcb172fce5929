use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("nifti error on {path}: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("degenerate std: {0}")]
    DegenerateStd(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("click limit exceeded: {0}")]
    ClickLimit(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown name: {0}")]
    UnknownName(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, iteration {iteration}: lesion={lesion_loss} organ={organ_loss}")]
    NonFiniteLoss {
        epoch: usize,
        iteration: usize,
        lesion_loss: f64,
        organ_loss: f64,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("case {case_id}: {source}")]
    Case {
        case_id: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn for_case(self, case_id: impl Into<String>) -> Self {
        Error::Case {
            case_id: case_id.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}

impl Error {
    /// The innermost error under any stage or case wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Case { source, .. } => source.root(),
            e => e,
        }
    }
}
