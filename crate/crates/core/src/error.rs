//! Error taxonomy shared across the crate.
//!
//! Every fallible public operation returns [`Result`]. The variants separate
//! mathematical domain violations (bad inputs to a formula), configuration
//! mistakes (shapes, unknown options), infeasible solver targets, broken
//! caller contracts (e.g. backward from a non-scalar root), and runtime
//! failures of iterative procedures.

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation
    /// (non-positive standard deviation, alpha >= 1, n too small, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Shape mismatch or invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// A requested target cannot be met anywhere in the feasible region.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Caller broke an API contract (e.g. backward from a non-scalar root).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An iterative procedure failed to reach its convergence criterion.
    #[error("did not converge: {0}")]
    NoConverge(String),

    /// Training aborted (non-finite objective or a violated runtime invariant).
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Underlying I/O failure (dataset files, checkpoints, records).
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Malformed JSON in a checkpoint, record, or dataset file.
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
