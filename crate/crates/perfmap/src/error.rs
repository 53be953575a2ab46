//! Error type shared across the crate.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition or type invariant was violated.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Two arrays that must align do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// NaN or infinity where finite values are required.
    #[error("non-finite data: {0}")]
    NonFinite(String),

    /// Input is degenerate for the requested operation, e.g. a constant
    /// volume for standardization or an all-zero AIF for deconvolution.
    /// The payload names what degenerated ("case ...", "AIF ...").
    #[error("degenerate {0}")]
    Degenerate(String),

    /// The file is not a recognized array container.
    #[error("unrecognized container: {0}")]
    BadContainer(String),

    /// The container header promises more payload than the file holds.
    #[error("truncated container: {0}")]
    Truncated(String),

    /// Bad configuration file or flag value.
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// Adapter for `map_err` that attaches the offending path.
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
