use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller violated an operation contract (wrong lengths, non-scalar
    /// loss node, inconsistent partition, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A named parameter or node was not found.
    #[error("lookup failed: {0}")]
    Lookup(String),

    /// Invalid model or run configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// A numeric operation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training diverged.
    #[error("training error: {0}")]
    Training(String),

    /// Malformed serialized data; offset is the byte position of the problem.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// A permutation was not a bijection or was applied inconsistently.
    #[error("permutation error: {0}")]
    Permutation(String),

    /// Input data out of range (e.g. token id >= vocab).
    #[error("input error: {0}")]
    Input(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
