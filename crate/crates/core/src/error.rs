use thiserror::Error;

/// Errors produced anywhere in the reconstruction stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation in {op}: {detail}")]
    Contract { op: String, detail: String },

    #[error("unsupported operation: {0}")]
    UnsupportedOp(String),

    #[error("power iteration did not converge after {iterations} iterations (last estimate {estimate})")]
    NonConvergence { iterations: usize, estimate: f64 },

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier, used for CLI error lines and FFI status codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract { .. } => "contract",
            Error::UnsupportedOp(_) => "unsupported_op",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::DegenerateMask(_) => "degenerate_mask",
            Error::NonFinite { .. } => "non_finite",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(op: &str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Contract {
        op: op.to_string(),
        detail: detail.into(),
    })
}
