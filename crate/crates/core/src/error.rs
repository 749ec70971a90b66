use thiserror::Error;

#[derive(Debug, Error)]
pub enum SfdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}{}", step_suffix(*.step))]
    NumericOverflow { op: &'static str, step: Option<u64> },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupted checkpoint: {0}")]
    Corrupted(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn step_suffix(step: Option<u64>) -> String {
    match step {
        Some(s) => format!(" at step {s}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, SfdError>;

pub(crate) fn contract(msg: impl Into<String>) -> SfdError {
    SfdError::Contract(msg.into())
}
