use thiserror::Error;

/// Errors shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions invalid for an operation; names the op and the dims.
    #[error("shape error in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed binary input; `offset` is the byte position of the problem.
    #[error("format error at byte offset {offset}: {details}")]
    Format { offset: u64, details: String },

    /// An optimization produced a non-finite loss and was aborted.
    /// `diagnostics` carries the trailing trace for post-mortems.
    #[error("numerical abort: {context}\n{diagnostics}")]
    Numerical { context: String, diagnostics: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape { op, details: details.into() }
    }

    pub(crate) fn contract(details: impl Into<String>) -> Self {
        Error::Contract(details.into())
    }

    pub(crate) fn format(offset: u64, details: impl Into<String>) -> Self {
        Error::Format { offset, details: details.into() }
    }
}
