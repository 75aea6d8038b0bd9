use thiserror::Error;

/// Errors produced by the cache simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate embedding: vector has zero norm")]
    DegenerateEmbedding,

    #[error("vector contains a non-finite entry")]
    NonFinite,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("step {k} is not in the configured step set")]
    UnknownStep { k: u32 },

    #[error("step {k} exceeds the total step count {n_steps}")]
    StepOutOfRange { k: u32, n_steps: u32 },

    #[error("state is at step {actual} but step {expected} was requested")]
    StepMismatch { expected: u32, actual: u32 },

    #[error("duplicate prompt id `{0}`")]
    DuplicatePrompt(String),

    #[error("admission must carry exactly the configured steps {expected:?}, got {actual:?}")]
    IncompleteStates { expected: Vec<u32>, actual: Vec<u32> },

    #[error("state store is full: eviction required first")]
    StoreFull,

    #[error("no cached item for prompt `{prompt_id}` at step {k}")]
    MissingEntry { prompt_id: String, k: u32 },

    #[error("requested {requested} victims but only {available} items are cached")]
    NotEnoughItems { requested: usize, available: usize },

    #[error("cannot train on an empty set of embeddings")]
    EmptyTrainingSet,

    #[error("cannot evaluate on an empty labeled set")]
    EmptyEvaluationSet,

    #[error("prompt text is empty")]
    EmptyText,

    #[error("prompt `{0}` carries neither text nor embedding")]
    EmptyPrompt(String),

    #[error("throughput is zero; cost per image is undefined")]
    ZeroThroughput,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed state file: {0}")]
    MalformedStateFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
