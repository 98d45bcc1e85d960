use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("model: {0}")]
    Model(#[from] hypca::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("metrics: {0}")]
    Metrics(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
