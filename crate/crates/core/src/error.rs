use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("bonded particles {0} and {1} coincide (separation below 1e-9)")]
    Singularity(usize, usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("trajectory diverged at step {step}: |coordinate| exceeded {limit:e}")]
    Divergence { step: usize, limit: f64 },

    #[error("parameter trees are not congruent: {0}")]
    TreeMismatch(String),

    #[error("model family {family} cannot run on this input: {reason}")]
    Capability { family: &'static str, reason: String },

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("training diverged: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for validation problems the user can
    /// fix up front, 2 for runtime/numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Config(_) | Error::Capability { .. } => 1,
            Error::Format { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
