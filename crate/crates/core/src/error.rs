use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("unsupported dimension {0} (supported: 2..=16)")]
    UnsupportedDimension(usize),

    #[error("matrix is not Hermitian (residual {residual:.3e})")]
    NotHermitian { residual: f64 },

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("integrator blow-up: {0}")]
    Integrator(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite measurement outcome {0}")]
    NonFiniteOutcome(f64),

    #[error("measurement record exhausted at step {step} (length {len})")]
    RecordExhausted { step: usize, len: usize },

    #[error("feedback delay buffer underflow")]
    BufferUnderflow,

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("trajectory {index} (seed {seed}) failed: {source}")]
    TrajectoryFailed {
        index: u64,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed archive: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
