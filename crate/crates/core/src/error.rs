use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid sample space: {0}")]
    InvalidSpace(String),

    #[error("sample space has {size} elements, above the enumeration cap of {cap}")]
    EnumerationCap { size: u128, cap: u64 },

    #[error("sample lies outside the model's sample space: {0}")]
    OutOfSpace(String),

    #[error("density evaluation requested from an implicit model")]
    ImplicitDensity,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("importance weights are degenerate: {0}")]
    DegenerateWeights(String),

    #[error("constraint is not differentiable with respect to the sample")]
    NotSampleDifferentiable,

    #[error("not a probability distribution: {0}")]
    NotADistribution(String),

    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    #[error("Markov chain is not ergodic: {0}")]
    NonErgodic(String),

    #[error("failed to converge: {0}")]
    NonConvergence(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("metric {metric} is not defined for task {task}")]
    MetricMismatch { metric: String, task: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
