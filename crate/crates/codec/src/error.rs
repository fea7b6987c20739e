use thiserror::Error;

pub type Result<T> = std::result::Result<T, CodecError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    /// A parameter is outside the codec's domain (non-positive bound, bad bit width).
    #[error("domain error: {0}")]
    Domain(String),
    /// The data to encode is unusable (NaN or infinite values).
    #[error("input error: {0}")]
    Input(String),
    /// A serialized block is malformed. `field` names the offending part.
    #[error("format error in `{field}`: {reason}")]
    Format { field: &'static str, reason: String },
}

impl CodecError {
    pub(crate) fn format(field: &'static str, reason: impl Into<String>) -> Self {
        CodecError::Format {
            field,
            reason: reason.into(),
        }
    }
}
