use crate::networks::NetworkParams;

/// Errors produced anywhere in the registration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid deformation field: {0}")]
    InvalidField(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("detached graph: {0}")]
    DetachedGraph(String),

    #[error("numerical divergence at iteration {iteration}: {reason}")]
    Divergence {
        iteration: usize,
        reason: String,
        /// Parameters from the last step at which everything was finite.
        last_good: Option<Box<NetworkParams>>,
    },

    #[error("unknown registration method `{0}`")]
    UnknownMethod(String),

    #[error("unknown report format `{0}`")]
    UnknownFormat(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_same_dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}
