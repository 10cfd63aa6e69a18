use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("prompt has {tokens} tokens, context window is {limit}")]
    PromptTooLong { tokens: usize, limit: usize },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("curriculum: {0}")]
    Curriculum(String),
    #[error("training: {0}")]
    Training(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("step {step} outside schedule [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },
    #[error(transparent)]
    Mask(#[from] convseg_core::MaskError),
    #[error(transparent)]
    Metrics(#[from] convseg_core::MetricsError),
    #[error(transparent)]
    Manifest(#[from] convseg_core::ManifestError),
    #[error("evaluation: {0}")]
    Evaluation(String),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

impl NetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NetError::Io {
            path: path.into(),
            source,
        }
    }
}
