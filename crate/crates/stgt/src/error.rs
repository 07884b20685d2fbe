use thiserror::Error;

/// Errors surfaced by the library and the CLI.
#[derive(Debug, Error)]
pub enum StgtError {
    #[error("shape mismatch: {left:?} is incompatible with {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index out of range: {what} = {got}, valid range 1..={max}")]
    IndexOutOfRange {
        what: &'static str,
        got: usize,
        max: usize,
    },

    #[error("non-finite value encountered in {context} (coordinate {coord})")]
    NonFinite { context: String, coord: usize },

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("tolerance breach in {segment}: relative error {got:e} exceeds {limit:e}")]
    ToleranceBreach {
        segment: String,
        got: f64,
        limit: f64,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StgtError>;

impl StgtError {
    /// Process exit code for the CLI. Distinct nonzero codes per failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            StgtError::Config(_) | StgtError::ShapeMismatch { .. } => 2,
            StgtError::NonFinite { .. }
            | StgtError::Numeric(_)
            | StgtError::DegenerateEmbedding(_) => 3,
            StgtError::ToleranceBreach { .. } => 4,
            _ => 1,
        }
    }
}
