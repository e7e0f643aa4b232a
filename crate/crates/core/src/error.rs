use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Error, Debug)]
pub enum Error {
    /// A tensor extent does not match what the operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation was configured with parameters it cannot execute.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data (datasets, annotations, checkpoints) is malformed.
    #[error("data error: {0}")]
    Data(String),

    /// A value is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An assignment problem has more rows than columns.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// The caller invoked an interface incorrectly.
    #[error("usage error: {0}")]
    Usage(String),

    /// A NaN or infinity appeared where finite values are guaranteed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
