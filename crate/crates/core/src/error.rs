use thiserror::Error;

use crate::numkernel::KernelError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("image extents {height}x{width} are not divisible by {divisor}")]
    NotDivisible {
        height: usize,
        width: usize,
        divisor: usize,
    },
    #[error("index {index} out of range for {extent} patches")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("retention ratio {ratio} keeps no patch out of {n}")]
    DegenerateRatio { ratio: f64, n: usize },
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("malformed {file} at byte {offset}: {reason}")]
    Format {
        file: String,
        offset: u64,
        reason: String,
    },
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
