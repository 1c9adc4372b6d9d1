use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes disagree along a named axis.
    #[error("dimension mismatch on {axis}: {detail}")]
    Dimension { axis: &'static str, detail: String },

    /// Convolution geometry yields an empty output.
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("numeric error in {tensor}: {detail}")]
    Numeric { tensor: String, detail: String },

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported weights file version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn dim(axis: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis,
            detail: detail.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
