use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown code {code} (table holds {limit} entries)")]
    UnknownCode { code: usize, limit: usize },
    #[error("optimizer state: {0}")]
    State(String),
    #[error("alignment: {0}")]
    Alignment(String),
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("singular transform: {0}")]
    Singularity(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidInput(alloc::format!($($arg)*)) };
}
pub(crate) use invalid;
pub(crate) use shape_err;

/// Reports a non-finite value met during training as divergence.
pub(crate) fn diverged(e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::TrainingDiverged(alloc::format!("non-finite value in {what}")),
        other => other,
    }
}
