//! Numeric kernels behind the graph operations.

pub mod conv;
pub mod gemm;
pub mod norm;
pub mod resample;
