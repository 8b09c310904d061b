//! Crate-wide error type.

/// Errors produced by construction, evolution, and analysis routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input failed a structural or numeric precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Dimension of an argument disagrees with the object it is used with.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The requested operation is not defined for this configuration.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A particle or iterate left the representable range.
    #[error("divergence at step {step}: {what}")]
    Diverged { step: u64, what: String },

    /// An iterative routine exhausted its budget before reaching tolerance.
    #[error("no convergence after {iterations} iterations (last residual {residual})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// A size budget (atoms, components, particles) was exceeded.
    #[error("budget exceeded: {0}")]
    Budget(String),

    /// Configuration file problems; collects every violation found.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }
}
