//! Quantizers for the binary attention pipeline.
//!
//! * Queries and keys: `μ·sign(x)` with one scalar `μ = mean|x|` per matrix.
//! * Attention coefficients in `[0, 1]`: unsigned 8-bit with static scale 1/255.
//! * Values: symmetric int8 per channel, `δ_c = max_i |v_ic| / 127`.
//!
//! Rounding is half away from zero everywhere.

use crate::bitops::pack_signs;
use crate::error::{Error, Result};
use crate::tensor::{BitMatrix, DenseMatrix, QuantizedValues};

pub const COEFF_LEVELS: f64 = 255.0;
pub const VALUE_LEVELS: f64 = 127.0;
const COEFF_SLACK: f64 = 1e-9;

/// Sign bits plus one nonnegative scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledBinary {
    pub bits: BitMatrix,
    pub scale: f64,
}

impl ScaledBinary {
    /// `μ·sign(x)` as a dense matrix.
    pub fn dequantize(&self) -> DenseMatrix {
        let signs = self.bits.unpack();
        DenseMatrix::from_parts_unchecked(
            signs.rows(),
            signs.cols(),
            signs.as_slice().iter().map(|s| s * self.scale).collect(),
        )
    }
}

/// Binarizes `m` with the L2-optimal scalar scale `mean|m|`.
pub fn binary_quantize(m: &DenseMatrix) -> Result<ScaledBinary> {
    if m.is_empty() {
        return Err(Error::shape(format!(
            "cannot binarize an empty {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let sum: f64 = m.as_slice().iter().map(|v| v.abs()).sum();
    Ok(ScaledBinary {
        bits: pack_signs(m),
        scale: sum / m.as_slice().len() as f64,
    })
}

/// Unsigned 8-bit attention coefficients with implicit scale 1/255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedCoeffs {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl QuantizedCoeffs {
    pub const SCALE: f64 = 1.0 / COEFF_LEVELS;

    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} coefficients need {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[u8] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn dequantize(&self) -> DenseMatrix {
        DenseMatrix::from_parts_unchecked(
            self.rows,
            self.cols,
            self.data
                .iter()
                .map(|&q| f64::from(q) * Self::SCALE)
                .collect(),
        )
    }
}

/// `round(p·255)` for `p` already clamped to `[0, 1]`.
#[inline]
pub fn quantize_coeff(p: f64) -> u8 {
    debug_assert!((0.0..=1.0).contains(&p));
    (p * COEFF_LEVELS).round() as u8
}

/// Quantizes a matrix of probabilities, clamping values within 1e-9 of `[0, 1]`.
pub fn quantize_coeffs(p: &DenseMatrix) -> Result<QuantizedCoeffs> {
    let data = p
        .as_slice()
        .iter()
        .map(|&v| {
            if !(-COEFF_SLACK..=1.0 + COEFF_SLACK).contains(&v) {
                return Err(Error::Range(format!("coefficient {v} outside [0, 1]")));
            }
            Ok(quantize_coeff(v.clamp(0.0, 1.0)))
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedCoeffs::new(p.rows(), p.cols(), data)
}

/// Per-column symmetric int8 quantization.
pub fn quantize_values(v: &DenseMatrix) -> QuantizedValues {
    let (rows, cols) = v.shape();
    let scales: Vec<f64> = (0..cols)
        .map(|c| {
            let peak = (0..rows).map(|i| v.get(i, c).abs()).fold(0.0, f64::max);
            if peak > 0.0 {
                peak / VALUE_LEVELS
            } else {
                1.0
            }
        })
        .collect();
    let data = (0..rows * cols)
        .map(|idx| {
            let q = (v.as_slice()[idx] / scales[idx % cols]).round();
            q.clamp(-VALUE_LEVELS, VALUE_LEVELS) as i8
        })
        .collect();
    QuantizedValues::new(rows, cols, data, scales).expect("scales are positive and data in range")
}

pub fn dequantize_values(q: &QuantizedValues) -> DenseMatrix {
    let cols = q.cols();
    let scales = q.channel_scales();
    DenseMatrix::from_parts_unchecked(
        q.rows(),
        cols,
        q.data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| scales[idx % cols] * f64::from(x))
            .collect(),
    )
}
