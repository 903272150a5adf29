use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("gradient program: {0}")]
    Program(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("export refused: sparse weight ratio {sparse_weight_ratio:.6} is below the required {threshold}; train longer or raise lambda")]
    ExportRefused {
        sparse_weight_ratio: f64,
        threshold: f64,
    },
    #[error("scaling law: {0}")]
    Law(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
