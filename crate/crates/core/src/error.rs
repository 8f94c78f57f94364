use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid scale partition: {0}")]
    InvalidPartition(String),

    #[error("invalid group proportions: {0}")]
    InvalidProportions(String),

    #[error("{queries} queries cannot cover {groups} groups")]
    TooFewQueries { queries: usize, groups: usize },

    #[error("attention mask needs at least one group of size >= 1: {0}")]
    InvalidMask(String),

    #[error("assignment infeasible: {0}")]
    Infeasible(String),

    #[error("brute-force enumeration bound exceeded: {0}")]
    EnumerationTooLarge(String),

    #[error("unknown query index {index} (store holds {len} queries)")]
    UnknownQuery { index: usize, len: usize },

    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in decoder layer {layer}: {what}")]
    NonFinite { layer: usize, what: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
