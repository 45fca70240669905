use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint integrity error: {0}")]
    Checkpoint(String),
    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
