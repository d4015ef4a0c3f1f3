use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable {0} is not on this tape")]
    NotOnTape(usize),
    #[error("invalid cell: {0}")]
    InvalidCell(String),
    #[error("cell already has {0} blocks, the configured maximum")]
    CellFull(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("support set is empty")]
    EmptySupport,
    #[error("no evaluation episodes")]
    NoEpisodes,
    #[error("history is empty")]
    EmptyHistory,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("bad magic: expected FSDS")]
    BadMagic,
    #[error("unsupported version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
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
}
