//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by corpus construction, model evaluation, decoding, and
/// the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus: {0}")]
    Corpus(String),

    #[error("masking: {0}")]
    Masking(String),

    #[error("attention layout: {0}")]
    Layout(String),

    #[error("model: {0}")]
    Model(String),

    /// A non-finite activation or gradient, tagged with where it appeared.
    #[error("non-finite value in {site}")]
    NonFinite { site: String },

    #[error("decode: {0}")]
    Decode(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
