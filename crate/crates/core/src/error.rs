use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    Tokenization { id: u32, vocab_size: usize },

    #[error("text of {len} tokens exceeds max_text_len {max}")]
    TextTooLong { len: usize, max: usize },

    #[error("hard-negative mining needs a batch of at least 2, got {0}")]
    Mining(usize),

    #[error("filtering error: {0}")]
    Filter(String),

    #[error("no concept record for image `{0}`")]
    MissingConcepts(String),

    #[error("dataset generation error: {0}")]
    Generation(String),

    #[error("embedding provider failed on `{item}`: {message}")]
    Provider { item: String, message: String },

    #[error("embedding aborted after {completed} cached concepts; failed on `{item}`: {message}")]
    PartialCache {
        completed: usize,
        item: String,
        message: String,
    },

    #[error("non-finite {loss} loss ({value})")]
    NonFinite { loss: &'static str, value: f64 },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("missing input file: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid record: {0}")]
    Record(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),

    #[error("http error: {0}")]
    Http(String),
}
