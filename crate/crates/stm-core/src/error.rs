use alloc::string::String;

/// Errors shared by all modules.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("rejected input: {0}")]
    RejectedInput(&'static str),
    #[error("rejected plan: {0}")]
    RejectedPlan(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::DimMismatch {
            what,
            expected,
            got,
        }
    }
}
