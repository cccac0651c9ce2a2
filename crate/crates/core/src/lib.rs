//! Decode-phase LLM kernels for the CPU.
//!
//! The crate covers the three hot spots of a transformer layer during
//! token-by-token generation:
//!
//! * [`attention`]: split-KV decode attention, either with per-chunk maxima
//!   merged after the fact or with one calibrated scaling factor shared by all
//!   chunks ([`softmax`] holds the underlying schemes and the calibration).
//! * [`gemm`]: a flat GEMM for `M << N, K` with rows padded to 8, sequential
//!   K tiles, parallel N tiles and double-buffered staging, plus its cost
//!   model.
//! * [`dispatch`]: picks between a GEMV-style kernel, the flat GEMM and a
//!   conventional blocked GEMM per `[N, K]` shape from offline-profiled
//!   inflection points.
//!
//! Every kernel computes in `f32` and is checked against `f64` oracles in
//! [`tensor`], [`softmax`] and [`attention`].

pub mod attention;
pub mod bench;
pub mod dispatch;
pub mod error;
pub mod gemm;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod softmax;
pub mod tensor;
pub mod timing;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{GemmShape, Matrix};

/// Worker count: `FLATDECODE_WORKERS` if set to a positive integer, else the
/// size of the current rayon pool.
pub fn workers() -> usize {
    std::env::var("FLATDECODE_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&w| w > 0)
        .unwrap_or_else(rayon::current_num_threads)
}
