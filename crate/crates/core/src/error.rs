use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed input at line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },

    #[error("corpus has no chunks")]
    EmptyCorpus,

    #[error("invalid window: window={window}, stride={stride} (need 1 <= stride <= window)")]
    InvalidWindow { window: usize, stride: usize },

    #[error("invalid resize factor {0}")]
    InvalidFactor(String),

    #[error("resize expects a base corpus, got label {0:?}")]
    NotBaseCorpus(String),

    #[error("remote endpoint {endpoint} unavailable: {status}")]
    RemoteUnavailable { endpoint: String, status: String },

    #[error("embedding collapsed to a zero vector")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("embedding chunk {chunk_id} failed: {source}")]
    ChunkEmbedding {
        chunk_id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("remote batch {batch}: expected {expected} vectors, got {got}")]
    BatchSizeMismatch {
        batch: usize,
        expected: usize,
        got: usize,
    },

    #[error("invalid provider spec: {0}")]
    InvalidProvider(String),

    #[error("non-finite value {what}")]
    NonFinite { what: String },

    #[error("non-finite score for chunk {0}")]
    NonFiniteScore(usize),

    #[error("distributions have different supports")]
    SupportMismatch,

    #[error("invalid adapter rank {rank} for dim {dim}")]
    InvalidRank { rank: usize, dim: usize },

    #[error("invalid adapter: {0}")]
    InvalidAdapter(String),

    #[error("corpus too small: {0} chunks (need at least 2)")]
    CorpusTooSmall(usize),

    #[error("query set is empty")]
    EmptyQuerySet,

    #[error("target text is empty")]
    EmptyTarget,

    #[error("invalid log-probability {0}")]
    InvalidLogProb(f64),

    #[error("no text for chunk {0}")]
    MissingChunkText(usize),

    #[error("candidate list is empty")]
    EmptyCandidates,

    #[error("invalid pattern size l={l} for k={k} (need 0 < l < k)")]
    InvalidL { l: usize, k: usize },

    #[error("cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error("query rewriter failed: {0}")]
    RewriterFailure(String),

    #[error("step {step} outside schedule of {steps} steps")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("training diverged at step {step}")]
    DivergenceGuard { step: usize },

    #[error("config hash mismatch: checkpoint has {stored}, current config is {current}")]
    ConfigMismatch { stored: String, current: String },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("no retrieved chunks")]
    NoRetrievedChunks,

    #[error("candidate answer pool is empty")]
    EmptyCandidatePool,

    #[error("no gold labels for query {0}")]
    MissingGold(String),

    #[error("gold answer list is empty")]
    EmptyGold,

    #[error("unknown query id {0}")]
    UnknownQueryId(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_cell(self, cell: impl Into<String>) -> Self {
        Error::Cell {
            cell: cell.into(),
            source: Box::new(self),
        }
    }
}
