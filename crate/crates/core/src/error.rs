use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("datapoint has zero norm{}", fmt_index(*.index))]
    ZeroNormDatapoint { index: Option<usize> },

    #[error("non-finite value in datapoint {index}")]
    NonFiniteValue { index: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid dimension {0}: {1}")]
    InvalidDimension(usize, &'static str),

    #[error("invalid threshold T={threshold} for norm {norm}: require 0 <= T < norm")]
    InvalidThreshold { threshold: f64, norm: f64 },

    #[error("invalid weight function: {0}")]
    InvalidWeightFunction(String),

    #[error("quadrature did not converge on [{lower}, {upper}] within depth {max_depth}")]
    QuadratureFailure { lower: f64, upper: f64, max_depth: u32 },

    #[error("linear system is not positive definite")]
    SingularSystem,

    #[error("linear system of size {size} exceeds the supported maximum {max}")]
    SystemTooLarge { size: usize, max: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("index is empty")]
    EmptyIndex,

    #[error("dimension {dim} is not divisible by {subspaces} subspaces")]
    DimensionNotDivisible { dim: usize, subspaces: usize },

    #[error("code {code} out of range for {k} codewords")]
    CodeOutOfRange { code: u32, k: usize },

    #[error("ground truth mismatch: {0}")]
    GroundTruthMismatch(String),

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

fn fmt_index(index: Option<usize>) -> String {
    match index {
        Some(i) => format!(" (row {i})"),
        None => String::new(),
    }
}
