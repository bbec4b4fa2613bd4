use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] slotbench_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("hash collision at {path}: stored config differs from the requested one")]
    HashCollision { path: PathBuf },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("image codec: {0}")]
    Image(String),
    #[error("report: {0}")]
    Report(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
