//! Error type shared across the crate.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A factorization hit a non-positive pivot; the matrix is not positive
    /// definite at the current damping level.
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    /// Tensor or mask dimensions do not agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A token id is outside the model vocabulary.
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    /// Perplexity was requested over an empty evaluation set.
    #[error("evaluation set is empty")]
    EmptyEvalSet,

    /// Training produced a non-finite loss.
    #[error("training loss diverged at step {step}")]
    DivergedLoss { step: usize },

    /// A binary file does not start with the expected magic bytes.
    #[error("bad magic in {path}: expected {expected}")]
    BadMagic { path: String, expected: String },

    /// A binary file ended before its declared payload.
    #[error("truncated file {path}: {detail}")]
    TruncatedFile { path: String, detail: String },

    /// A stored token id exceeds the stored vocabulary size.
    #[error("token id {id} out of range for stored vocab {vocab}")]
    IdOutOfRange { id: u32, vocab: u32 },

    /// The corpus is shorter than one sampling window.
    #[error("corpus has {have} tokens, need at least {need}")]
    CorpusTooShort { have: usize, need: usize },

    /// Two genomes built against different model configurations.
    #[error("config fingerprint mismatch: {a} vs {b}")]
    ConfigMismatch { a: String, b: String },

    /// Every candidate of a generation fell outside the parameter budget.
    #[error("no candidate satisfied the parameter budget window")]
    NoSatisfyingCandidate,

    /// An ADMM iterate became non-finite.
    #[error("non-finite iterate at ADMM step {step}")]
    NonFiniteIterate { step: usize },

    /// A head mask kept zero dimensions; attention over an empty head is
    /// undefined.
    #[error("block {block} head {head} keeps zero dimensions")]
    EmptyHead { block: usize, head: usize },

    /// A container manifest is internally inconsistent.
    #[error("manifest mismatch in {path}: {detail}")]
    ManifestMismatch { path: String, detail: String },

    /// A stored blob does not hash to its manifest entry.
    #[error("checksum mismatch for tensor {name} in {path}")]
    ChecksumMismatch { path: String, name: String },

    /// A genome fails search-space validation.
    #[error("genome violates search space: {0}")]
    InvalidGenome(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
