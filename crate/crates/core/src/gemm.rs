//! Plain baseline GEMMs, `C = A·Bᵀ` with both operands row-major.
//!
//! These are the comparison points for [`crate::bitops::binary_gemm`]:
//! single-threaded, no blocking, no SIMD beyond what the compiler finds.

use crate::error::{Error, Result};

fn check(a_len: usize, b_len: usize, n: usize, m: usize, d: usize) -> Result<()> {
    if a_len != n * d || b_len != m * d {
        return Err(Error::Shape(format!(
            "gemm operands of length {a_len} and {b_len} do not fit {n}x{d} and {m}x{d}"
        )));
    }
    Ok(())
}

/// Naive `f32` triple loop with an `f32` accumulator.
pub fn naive_f32_gemm(a: &[f32], b: &[f32], n: usize, m: usize, d: usize) -> Result<Vec<f32>> {
    check(a.len(), b.len(), n, m, d)?;
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..m {
            let bj = &b[j * d..(j + 1) * d];
            let mut acc = 0.0f32;
            for c in 0..d {
                acc += ai[c] * bj[c];
            }
            out[i * m + j] = acc;
        }
    }
    Ok(out)
}

/// `i8 × i8` products accumulated in `i32`.
pub fn int8_gemm(a: &[i8], b: &[i8], n: usize, m: usize, d: usize) -> Result<Vec<i32>> {
    check(a.len(), b.len(), n, m, d)?;
    let mut out = vec![0i32; n * m];
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..m {
            let bj = &b[j * d..(j + 1) * d];
            out[i * m + j] = ai
                .iter()
                .zip(bj)
                .map(|(&x, &y)| i32::from(x) * i32::from(y))
                .sum();
        }
    }
    Ok(out)
}
