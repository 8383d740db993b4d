use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tokenizer: {0}")]
    Tokenize(String),

    #[error("template: {0}")]
    Template(String),

    #[error("model: {0}")]
    Model(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data: {0}")]
    Data(String),

    #[error("training: {0}")]
    Train(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
