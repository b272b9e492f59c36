use thiserror::Error;

/// Errors raised by the simulator and its components.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AfflError {
    #[error("federation must contain at least one client")]
    NoClients,

    #[error("dirichlet concentration must be positive, got {0}")]
    NonPositiveConcentration(f64),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("architecture mismatch between models")]
    ArchMismatch,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty shard")]
    EmptyShard,

    #[error("requested {tiers} difficulty tiers but shard has {samples} samples")]
    TooManyTiers { tiers: usize, samples: usize },

    #[error("shard has no difficulty tiers assigned")]
    MissingTiers,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("exact shapley enumeration supports at most {max} clients, got {actual}")]
    ShapleyTooLarge { max: usize, actual: usize },

    #[error("all aggregation weights are zero")]
    ZeroWeights,

    #[error("trimmed mean needs more than {needed} clients, got {actual}")]
    InsufficientQuorum { needed: usize, actual: usize },

    #[error("privacy accounting is undefined for a zero noise multiplier")]
    InfinitePrivacyLoss,

    #[error("no modalities present")]
    NoModalities,

    #[error("io error: {0}")]
    Io(String),

    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },
}

impl From<std::io::Error> for AfflError {
    fn from(e: std::io::Error) -> Self {
        AfflError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AfflError>;
