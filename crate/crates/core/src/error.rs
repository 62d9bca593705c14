use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{kind} id {id} out of range (size {size})")]
    OutOfRange {
        kind: &'static str,
        id: usize,
        size: usize,
    },
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("non-finite loss {loss} in batch of {} pairs", batch.len())]
    NonFiniteLoss {
        loss: f64,
        /// (user, job, label) triples of the offending batch.
        batch: Vec<(u32, u32, u8)>,
    },
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
