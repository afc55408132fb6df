//! Dense, sign-packed and 8-bit tensor containers.
//!
//! Every container is immutable once constructed. Dense matrices always hold
//! their values as `f64`; the [`Precision`] tag records whether the values
//! were rounded to `f32` on construction and decides the on-disk encoding.

use std::fmt;

use crate::error::{Error, Result};

/// Storage precision tag for a [`DenseMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

/// Row-major real matrix.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    precision: Precision,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds an `f64` matrix, rejecting non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::with_precision(rows, cols, data, Precision::F64)
    }

    /// Builds an `f32`-tagged matrix.
    pub fn from_f32(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::with_precision(
            rows,
            cols,
            data.into_iter().map(f64::from).collect(),
            Precision::F32,
        )
    }

    fn with_precision(
        rows: usize,
        cols: usize,
        mut data: Vec<f64>,
        precision: Precision,
    ) -> Result<Self> {
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::shape(format!("{rows}x{cols} overflows")))?;
        if data.len() != len {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {len} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        if precision == Precision::F32 {
            for v in &mut data {
                let narrowed = *v as f32;
                if !narrowed.is_finite() {
                    return Err(Error::Validation(format!("{v} overflows f32")));
                }
                *v = f64::from(narrowed);
            }
        }
        Ok(Self {
            rows,
            cols,
            precision,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            precision: Precision::F64,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from `f(row, col)`; panics if `f` yields a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data).expect("from_fn produced a non-finite value")
    }

    pub(crate) fn from_parts_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            rows,
            cols,
            precision: Precision::F64,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_parts_unchecked(
            self.cols,
            self.rows,
            (0..self.cols * self.rows)
                .map(|idx| self.get(idx % self.rows, idx / self.rows))
                .collect(),
        )
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<DenseMatrix> {
        DenseMatrix::new(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    pub(crate) fn ensure_shape(&self, rows: usize, cols: usize, what: &str) -> Result<()> {
        if self.shape() != (rows, cols) {
            return Err(Error::shape(format!(
                "{what}: expected {rows}x{cols}, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseMatrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("precision", &self.precision)
            .finish_non_exhaustive()
    }
}

/// Row-major sign matrix, 64 signs per word.
///
/// Bit `c % 64` of word `c / 64` in a row is 1 for sign +1 and 0 for sign -1.
/// Bits past the logical width are always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

/// Borrowed view of one row of a [`BitMatrix`].
#[derive(Debug, Clone, Copy)]
pub struct BitRow<'a> {
    pub(crate) words: &'a [u64],
    pub(crate) len: usize,
}

impl<'a> BitRow<'a> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &'a [u64] {
        self.words
    }

    #[inline]
    pub fn bit(&self, col: usize) -> bool {
        assert!(col < self.len);
        (self.words[col / 64] >> (col % 64)) & 1 == 1
    }
}

pub const fn words_for(cols: usize) -> usize {
    cols.div_ceil(64)
}

/// Mask selecting the live bits of the last word of a `cols`-wide row.
pub const fn tail_mask(cols: usize) -> u64 {
    match cols % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl BitMatrix {
    /// Wraps packed words, rejecting rows with set pad bits.
    pub fn from_words(rows: usize, cols: usize, words: Vec<u64>) -> Result<Self> {
        let words_per_row = words_for(cols);
        if words.len() != rows * words_per_row {
            return Err(Error::shape(format!(
                "{rows}x{cols} bit matrix needs {} words, got {}",
                rows * words_per_row,
                words.len()
            )));
        }
        if words_per_row > 0 {
            let mask = tail_mask(cols);
            for (i, row) in words.chunks_exact(words_per_row).enumerate() {
                if row[words_per_row - 1] & !mask != 0 {
                    return Err(Error::Validation(format!(
                        "row {i} has nonzero pad bits beyond width {cols}"
                    )));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            words_per_row,
            words,
        })
    }

    /// Packs `sign(x)` for every entry yielded by `positive(row, col)`.
    pub(crate) fn from_predicate(
        rows: usize,
        cols: usize,
        positive: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let words_per_row = words_for(cols);
        let mut words = vec![0u64; rows * words_per_row];
        for i in 0..rows {
            let row = &mut words[i * words_per_row..(i + 1) * words_per_row];
            for c in 0..cols {
                if positive(i, c) {
                    row[c / 64] |= 1 << (c % 64);
                }
            }
        }
        Self {
            rows,
            cols,
            words_per_row,
            words,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Logical width `d`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn row(&self, row: usize) -> BitRow<'_> {
        BitRow {
            words: &self.words[row * self.words_per_row..(row + 1) * self.words_per_row],
            len: self.cols,
        }
    }

    /// Sign at `(row, col)` as +1 or -1.
    #[inline]
    pub fn sign(&self, row: usize, col: usize) -> i32 {
        if self.row(row).bit(col) {
            1
        } else {
            -1
        }
    }

    /// Expands to a dense matrix of +1.0 / -1.0.
    pub fn unpack(&self) -> DenseMatrix {
        DenseMatrix::from_parts_unchecked(
            self.rows,
            self.cols,
            (0..self.rows * self.cols)
                .map(|idx| f64::from(self.sign(idx / self.cols, idx % self.cols)))
                .collect(),
        )
    }
}

/// Channel-wise symmetric int8 values with one positive scale per column.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedValues {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
    channel_scales: Vec<f64>,
}

impl QuantizedValues {
    pub fn new(rows: usize, cols: usize, data: Vec<i8>, channel_scales: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} values need {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if channel_scales.len() != cols {
            return Err(Error::shape(format!(
                "expected {cols} channel scales, got {}",
                channel_scales.len()
            )));
        }
        if data.contains(&i8::MIN) {
            return Err(Error::Validation(
                "value -128 is outside [-127, 127]".into(),
            ));
        }
        if let Some(s) = channel_scales
            .iter()
            .find(|s| !(s.is_finite() && **s > 0.0))
        {
            return Err(Error::Validation(format!(
                "channel scale {s} is not strictly positive"
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            channel_scales,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[i8] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn channel_scales(&self) -> &[f64] {
        &self.channel_scales
    }
}

/// Row-major `i32` matrix, the output of integer GEMMs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i32>,
}

impl IntMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<i32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} int matrix needs {} entries, got {}",
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

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> i32 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[i32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[i32] {
        &self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_rejects_non_finite() {
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![1.0, f64::INFINITY]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            DenseMatrix::new(2, 2, vec![1.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn f32_tag_rounds_values() {
        let m = DenseMatrix::from_f32(1, 1, vec![0.1]).unwrap();
        assert_eq!(m.precision(), Precision::F32);
        assert_eq!(m.get(0, 0), f64::from(0.1f32));
    }

    #[test]
    fn bit_matrix_rejects_pad_bits() {
        assert!(BitMatrix::from_words(1, 3, vec![0b111]).is_ok());
        assert!(matches!(
            BitMatrix::from_words(1, 3, vec![0b1111]),
            Err(Error::Validation(_))
        ));
        assert!(BitMatrix::from_words(1, 64, vec![u64::MAX]).is_ok());
    }

    #[test]
    fn quantized_values_reject_min_and_bad_scales() {
        assert!(QuantizedValues::new(1, 1, vec![i8::MIN], vec![1.0]).is_err());
        assert!(QuantizedValues::new(1, 1, vec![3], vec![0.0]).is_err());
        assert!(QuantizedValues::new(1, 1, vec![3], vec![0.5]).is_ok());
    }

    #[test]
    fn transpose_swaps_indices() {
        let m = DenseMatrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        let t = m.transpose();
        assert_eq!(t.shape(), (3, 2));
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), t.get(j, i));
            }
        }
    }
}
