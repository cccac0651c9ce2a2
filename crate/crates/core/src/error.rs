use std::path::PathBuf;

/// Errors raised by the kernels, oracles and file formats in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid dimensions {rows}x{cols}: both must be at least 1")]
    EmptyShape { rows: usize, cols: usize },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },

    #[error("input vector is empty")]
    EmptyInput,

    #[error("invalid partition count {parts} for length {len}")]
    InvalidPartition { parts: usize, len: usize },

    #[error("exponent overflow at index {index}")]
    Overflow { index: usize },

    #[error("exponential sum underflowed to zero")]
    DegenerateSum,

    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),

    #[error(
        "logit range too wide for a unified scaling factor (upper bound {required_b} >= {limit}); \
         the asynchronous path does not apply to this distribution"
    )]
    UncalibratableRange { required_b: f32, limit: f32 },

    #[error("invalid tile b_n={b_n} b_k={b_k} for shape n={n} k={k}")]
    InvalidTile { b_n: usize, b_k: usize, n: usize, k: usize },

    #[error("timing unstable at m={m} for {kernel}: MAD {mad_us:.1}us exceeds 20% of median {median_us:.1}us")]
    TimingUnstable { m: usize, kernel: String, median_us: f64, mad_us: f64 },

    #[error("no dispatch entry for shape n={n} k={k}")]
    UnknownShape { n: usize, k: usize },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("unsupported dispatch table version {found} (expected {expected})")]
    VersionMismatch { found: String, expected: u32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
