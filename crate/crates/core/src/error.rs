use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON at line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("language with zero examples: {0}")]
    ZeroExamples(String),

    #[error("unknown language: {0}")]
    UnknownLanguage(String),

    #[error("id out of vocabulary: {id} (vocabulary size {vocab_size})")]
    IdOutOfVocabulary { id: u32, vocab_size: usize },

    #[error("unrecognized embedding file: {0}")]
    UnrecognizedEmbeddingFile(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in row {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty sequence in row {0}")]
    EmptySequence(usize),

    #[error("zero-norm embedding in row {0}")]
    ZeroNorm(usize),

    #[error("unnormalized input: row {row} has norm {norm}")]
    Unnormalized { row: usize, norm: f64 },

    #[error("no in-batch negatives: batch size {0}")]
    NoInBatchNegatives(usize),

    #[error("divergence at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("epsilon must be positive")]
    NonPositiveEpsilon,

    #[error("version mismatch: {0}")]
    VersionMismatch(String),

    #[error("tensor-size mismatch: {0}")]
    TensorSizeMismatch(String),

    #[error("vocabulary mismatch")]
    VocabularyMismatch,

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
