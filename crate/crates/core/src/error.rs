use thiserror::Error;

/// Every failure the tokenizer can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("capacity error: {needed} tokens for {slots} decoder slots")]
    Capacity { needed: usize, slots: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("oracle too large: {0} items (max 20)")]
    OracleTooLarge(usize),
    #[error("model mismatch: stream checksum {stream:#010x}, model checksum {model:#010x}")]
    ModelMismatch { stream: u32, model: u32 },
    #[error("training diverged at step {step}: loss {loss}")]
    TrainingDiverged { step: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
