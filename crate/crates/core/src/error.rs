use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A shape, extent, or value precondition was violated by the caller.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("degenerate matrix norm for `{0}`")]
    DegenerateNorm(String),

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    #[error("unknown {kind} `{name}` (expected one of: {expected})")]
    UnknownName {
        kind: &'static str,
        name: String,
        expected: String,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error at {location}: {message}")]
    Config { location: String, message: String },

    #[error("image error for {path:?}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

macro_rules! ensure_arg {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Argument(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure_arg;
