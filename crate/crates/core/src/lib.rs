//! Low-precision deep learning toolkit: k-bit quantizers, a bit-packed
//! ternary GEMM, an output-stationary systolic array simulator, network
//! footprint and compute-cost analytics, and a small training harness with
//! wide reduced-precision and distillation schemes.

pub mod accel;
pub mod error;
pub mod linalg;
pub mod netspec;
pub mod quant;
pub mod toytrain;

pub use error::{Error, Result};
