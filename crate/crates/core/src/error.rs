use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("degenerate result: {0}")]
    Degenerate(String),

    #[error("solver did not converge after {iterations} sweeps (residual {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures while decoding one of the on-disk formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported {format} version {found} (this build reads version {supported})")]
    UnsupportedVersion {
        format: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("truncated {format} payload: needed {needed} bytes, found {found}")]
    Truncated {
        format: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("{format} version {version} payload followed by {extra} unexpected trailing bytes")]
    TrailingBytes {
        format: &'static str,
        version: u32,
        extra: usize,
    },

    #[error("schema violation at line {line}, field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Degenerate(_) | Error::Convergence { .. } | Error::NonFinite(_)
        )
    }

    /// True for configuration and argument problems.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_) | Error::Capacity(_))
    }
}
