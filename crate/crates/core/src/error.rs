use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid token: {0}")]
    InvalidToken(String),

    #[error("LoRA adapters are already injected into this model")]
    AlreadyWrapped,

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    /// The tag-pair delimiter was not found; `raw` is the untouched model output.
    #[error("delimiter `{delimiter}` not found in output")]
    ParseMiss { raw: String, delimiter: String },

    #[error("loss diverged (non-finite) at step {step}")]
    Divergence { step: usize },

    #[error("batch needs {required} bytes of decode state, budget is {budget}")]
    BatchTooLarge { required: usize, budget: usize },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}:{line}: schema error: {msg}", path.display())]
    Schema {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    Unknown {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
