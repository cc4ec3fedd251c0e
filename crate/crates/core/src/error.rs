use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("video {video_id}: {detail}")]
    InvalidVideo { video_id: String, detail: String },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Eval(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}

pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Degenerate {
        op,
        detail: detail.into(),
    }
}
