use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {kernel}: {detail}")]
    Shape { kernel: &'static str, detail: String },

    #[error("non-finite value produced by {kernel}")]
    NumericOverflow { kernel: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing modality `{0}`")]
    MissingModality(String),

    #[error("empty modality set")]
    EmptyModalitySet,

    #[error("invalid label: {0}")]
    Label(String),

    #[error("ingestion error at row {row}: {detail}")]
    Ingest { row: usize, detail: String },

    #[error("parameter mismatch at `{name}`: {detail}")]
    ParamMismatch { name: String, detail: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("malformed score matrix at line {line}: {detail}")]
    Matrix { line: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(kernel: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            kernel,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
