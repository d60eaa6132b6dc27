use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure classes of the
/// pipeline stages: tensor shape checks, data ingestion, graph
/// construction, configuration, and numeric breakdown during training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("graph construction error: {0}")]
    Graph(String),

    #[error("degenerate row: {0}")]
    DegenerateRow(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric domain error: {0}")]
    Numeric(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
