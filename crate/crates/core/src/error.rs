use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform. Both shapes are spelled out so the
    /// message is actionable without a debugger.
    #[error("{op}: shape mismatch, {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: String, rhs: String },

    /// A configuration value is outside its legal domain.
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated (non-scalar backward root, reuse of a
    /// consumed graph, and the like).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared in the named operation's output.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Unknown configuration key, with the closest known key as a hint.
    #[error("unknown key `{key}` (did you mean `{nearest}`?)")]
    UnknownKey { key: String, nearest: String },

    /// Malformed file contents (snapshot, config, scene assets).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: impl std::fmt::Debug, rhs: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch { op, lhs: format!("{lhs:?}"), rhs: format!("{rhs:?}") }
    }
}
