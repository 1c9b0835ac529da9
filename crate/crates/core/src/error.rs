use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in frame {frame}: {message}")]
    Parse { frame: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("normalization error: {0}")]
    Normalization(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("training aborted at stage {stage}, frame {frame}: non-finite {component} loss")]
    NonFiniteLoss {
        stage: String,
        frame: usize,
        component: String,
    },
    #[error("edit error: {0}")]
    Edit(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("study error: {0}")]
    Study(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Normalization(_) => "normalization",
            Error::Label(_) => "label",
            Error::Dimension(_) => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Dataset(_) => "dataset",
            Error::NonFiniteLoss { .. } => "training",
            Error::Edit(_) => "edit",
            Error::Metric(_) => "metric",
            Error::Study(_) => "study",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}

impl From<cascade_autograd::EngineError> for Error {
    fn from(e: cascade_autograd::EngineError) -> Self {
        Error::Shape(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
