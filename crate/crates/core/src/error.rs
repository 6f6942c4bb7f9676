//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by benchmark construction, modeling, training, scoring,
/// and reporting.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination.
    #[error("config: {0}")]
    Config(String),

    /// Lexicon violates an invariant (duplicate term, empty axis, ...).
    #[error("lexicon: {0}")]
    Lexicon(String),

    /// Template text is malformed (placeholder count, axis, ...).
    #[error("template: {0}")]
    Template(String),

    /// A structured file failed to parse.
    #[error("parse {path}: {message}")]
    Parse { path: String, message: String },

    /// Tensor shape mismatch.
    #[error("shape: {0}")]
    Shape(String),

    /// Tokenizer rejected the input.
    #[error("tokenize: {0}")]
    Tokenize(String),

    /// Sequence does not fit the model context.
    #[error("context overflow: sequence of {len} tokens exceeds context {context}")]
    ContextOverflow { len: usize, context: usize },

    /// Token id outside the model vocabulary.
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    /// Operation requires an adapter that is not attached.
    #[error("no adapter attached: {0}")]
    NoAdapter(String),

    /// Operation conflicts with an adapter that is already attached.
    #[error("adapter already attached: {0}")]
    AdapterAttached(String),

    /// Training input is unusable (empty corpus, short sequences, ...).
    #[error("train: {0}")]
    Train(String),

    /// Non-finite value where a finite one is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Scoring backend failed.
    #[error("backend {backend}: {message}")]
    Backend { backend: String, message: String },

    /// Scoring backend did not answer within the deadline.
    #[error("backend {backend}: request {id} timed out after {millis} ms")]
    Timeout {
        backend: String,
        id: u64,
        millis: u64,
    },

    /// Scoring backend answered with an id that was never issued.
    #[error("backend {backend}: response id {got} does not match any outstanding request")]
    IdMismatch { backend: String, got: u64 },

    /// Scoring backend sent a line that does not parse as a response.
    #[error("backend {backend}: malformed response line: {line}")]
    MalformedResponse { backend: String, line: String },

    /// Statistical routine rejected its input.
    #[error("stats: {0}")]
    Stats(String),

    /// A required input artifact is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Checkpoint container is corrupt or has an unsupported version.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
