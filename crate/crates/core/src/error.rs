use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite numeric input: {0}")]
    NumericInput(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("transition kernel undefined: {0}")]
    UndefinedKernel(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
