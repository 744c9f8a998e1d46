use comix_core::audiofe::AudioError;
use comix_core::config::ConfigError;
use comix_core::corpus::CorpusError;
use comix_core::textnorm::TextnormError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Text(#[from] TextnormError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("character id {id} is outside the vocabulary (size {size})")]
    OutOfVocabulary { id: u32, size: usize },
    #[error("character {ch:?} is not in vocabulary {vocab:?}")]
    UnknownSymbol { ch: char, vocab: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("parameter {name}: checkpoint shape {found:?} does not fit model shape {expected:?}")]
    SurgeryShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("prefix {prefix:?} in `{field}` matches no parameter")]
    UnmatchedPrefix { field: &'static str, prefix: String },
    #[error("recipe: {0}")]
    Recipe(String),
    #[error("speaker: {0}")]
    Speaker(String),
    #[error("unseen speaker not supported in avg-embed: {0:?}")]
    UnseenSpeaker(String),
    #[error("audio configs differ between checkpoints: {0}")]
    AudioConfigMismatch(String),
    #[error("synthesis: {0}")]
    Synthesis(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}
