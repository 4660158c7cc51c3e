use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention row {row} has no admissible key")]
    EmptyMaskRow { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("target {target} at position {position} is outside the vocabulary of {vocab}")]
    TargetOutOfRange {
        position: usize,
        target: usize,
        vocab: usize,
    },

    #[error("non-finite loss {value} ({context})")]
    NonFinite { value: f64, context: String },

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("segmentation mismatch: {0}")]
    Segmentation(String),

    #[error("cross-attention assignment {index} out of range for {latents} latent tokens")]
    LatentOutOfRange { index: usize, latents: usize },

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("no drafted bytes in trace")]
    NoDrafts,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
