//! Error types shared across the workspace.

/// Crate-wide error type.
///
/// Parsers and numeric kernels report failures through these variants
/// instead of panicking; the CLI maps them onto process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// NaN/Inf produced by a forward or backward computation.
    #[error("numerical error at node {node}: {msg}")]
    Numerical { node: usize, msg: String },
    /// Invalid configuration (unknown architecture, bad label, empty pool, ...).
    #[error("config error: {0}")]
    Config(String),
    /// Malformed on-disk payload (bad magic, truncated file, bad record size).
    #[error("format error: {0}")]
    Format(String),
    /// Stored artifact fails its integrity check or is missing a member.
    #[error("corruption error: {0}")]
    Corruption(String),
    /// Dataset missing or unusable.
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numerical(node: usize, msg: impl Into<String>) -> Self {
        Error::Numerical { node, msg: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn corruption(msg: impl Into<String>) -> Self {
        Error::Corruption(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
