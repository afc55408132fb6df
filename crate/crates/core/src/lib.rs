//! Binary query/key attention on the CPU.
//!
//! Queries and keys are reduced to packed signs plus one scale each, so
//! `QKᵀ` becomes XNOR/popcount arithmetic; attention coefficients and
//! values can additionally be quantized to 8 bits. Alongside the kernels the
//! crate carries the oracles used to check them: a full-precision reference
//! path, Monte Carlo checks of the arcsine law for sign correlations,
//! fidelity metrics, operation accounting and finite-difference gradient
//! checks.

pub mod attention;
pub mod bitops;
pub mod error;
pub mod fidelity;
pub mod gemm;
pub mod qat;
pub mod quantize;
pub mod rng;
pub mod tensor;
pub mod tensor_io;
pub mod theory;

pub use attention::{
    binary_attention_fused, binary_attention_fused_counted, binary_attention_unfused,
    binary_scores, materialize_bias, pv_quantization_bound, reference_attention, AttentionConfig,
    AttentionOutput, BiasSpec,
};
pub use bitops::{binary_gemm, hamming_distance, pack_signs, xnor_popcount_dot, PopcountDot};
pub use error::{Error, Result};
pub use fidelity::{attention_fidelity, count_ops, FidelityReport, OpCounts, OpsReport};
pub use quantize::{
    binary_quantize, dequantize_values, quantize_coeffs, quantize_values, QuantizedCoeffs,
    ScaledBinary,
};
pub use tensor::{BitMatrix, BitRow, DenseMatrix, IntMatrix, Precision, QuantizedValues};
pub use tensor_io::{read_tensor, write_tensor, Tensor};
