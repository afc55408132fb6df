//! Sign packing and XNOR/popcount arithmetic.
//!
//! For ±1 vectors `s`, `t` of width `d`, the dot product counts agreements
//! minus disagreements, so `s·t = 2·agree − d = d − 2·hamming(s, t)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{tail_mask, BitMatrix, BitRow, DenseMatrix, IntMatrix};

/// Agreement count between two sign rows of logical width `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PopcountDot {
    pub d: usize,
    pub agreements: usize,
}

impl PopcountDot {
    /// ±1 inner product, in `[-d, d]` with the parity of `d`.
    pub fn dot(&self) -> i64 {
        2 * self.agreements as i64 - self.d as i64
    }

    pub fn hamming(&self) -> usize {
        self.d - self.agreements
    }

    /// Cosine of the angle between the two ±1 vectors.
    pub fn cosine(&self) -> f64 {
        self.dot() as f64 / self.d as f64
    }
}

/// Packs `sign(x)` row by row with `sign(0) = +1`.
pub fn pack_signs(m: &DenseMatrix) -> BitMatrix {
    BitMatrix::from_predicate(m.rows(), m.cols(), |i, c| m.get(i, c) >= 0.0)
}

fn check_widths(a: &BitRow<'_>, b: &BitRow<'_>) -> Result<()> {
    if a.len != b.len {
        return Err(Error::shape(format!(
            "row widths differ: {} vs {}",
            a.len, b.len
        )));
    }
    Ok(())
}

#[inline(always)]
fn agreements_words(a: &[u64], b: &[u64], mask: u64) -> u32 {
    let Some(last) = a.len().checked_sub(1) else {
        return 0;
    };
    let mut count = 0;
    for w in 0..last {
        count += (!(a[w] ^ b[w])).count_ones();
    }
    count + (!(a[last] ^ b[last]) & mask).count_ones()
}

/// ±1 dot product of two equal-width rows without the width check.
#[inline]
pub(crate) fn dot_unchecked(a: BitRow<'_>, b: BitRow<'_>) -> i32 {
    debug_assert_eq!(a.len, b.len);
    2 * agreements_words(a.words, b.words, tail_mask(a.len)) as i32 - a.len as i32
}

/// Agreement count of two rows.
pub fn popcount_dot(a: BitRow<'_>, b: BitRow<'_>) -> Result<PopcountDot> {
    check_widths(&a, &b)?;
    Ok(PopcountDot {
        d: a.len,
        agreements: agreements_words(a.words, b.words, tail_mask(a.len)) as usize,
    })
}

/// `s·t` under ±1 semantics, as `2·popcount(XNOR) − d`.
pub fn xnor_popcount_dot(a: BitRow<'_>, b: BitRow<'_>) -> Result<i64> {
    Ok(popcount_dot(a, b)?.dot())
}

/// Number of differing sign positions.
pub fn hamming_distance(a: BitRow<'_>, b: BitRow<'_>) -> Result<usize> {
    check_widths(&a, &b)?;
    let Some(last) = a.words.len().checked_sub(1) else {
        return Ok(0);
    };
    let mut count = 0u32;
    for w in 0..last {
        count += (a.words[w] ^ b.words[w]).count_ones();
    }
    count += ((a.words[last] ^ b.words[last]) & tail_mask(a.len)).count_ones();
    Ok(count as usize)
}

// Output rows per parallel task and T rows per cache tile.
const ROW_BLOCK: usize = 16;
const COL_BLOCK: usize = 256;

#[inline(always)]
fn gemm_block(s: &BitMatrix, t: &BitMatrix, first_row: usize, out: &mut [i32]) {
    let m = t.rows();
    let d = s.cols() as i32;
    let mask = tail_mask(s.cols());
    let rows = out.len() / m.max(1);
    for tile in (0..m).step_by(COL_BLOCK) {
        let tile_end = (tile + COL_BLOCK).min(m);
        for r in 0..rows {
            let a = s.row(first_row + r).words;
            let dst = &mut out[r * m + tile..r * m + tile_end];
            for (j, cell) in (tile..tile_end).zip(dst) {
                let agree = agreements_words(a, t.row(j).words, mask) as i32;
                *cell = 2 * agree - d;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn gemm_block_popcnt(s: &BitMatrix, t: &BitMatrix, first_row: usize, out: &mut [i32]) {
    gemm_block(s, t, first_row, out)
}

fn dispatch_block(s: &BitMatrix, t: &BitMatrix, first_row: usize, out: &mut [i32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("popcnt") {
        // SAFETY: the popcnt feature was detected at runtime.
        unsafe { gemm_block_popcnt(s, t, first_row, out) };
        return;
    }
    gemm_block(s, t, first_row, out)
}

/// All pairwise ±1 dot products between rows of `s` (N×d) and `t` (M×d).
///
/// Output rows are computed in parallel; each entry is an exact integer, so
/// the result does not depend on the thread count.
pub fn binary_gemm(s: &BitMatrix, t: &BitMatrix) -> Result<IntMatrix> {
    if s.cols() != t.cols() {
        return Err(Error::shape(format!(
            "binary_gemm widths differ: {} vs {}",
            s.cols(),
            t.cols()
        )));
    }
    let (n, m) = (s.rows(), t.rows());
    let mut out = vec![0i32; n * m];
    if m > 0 {
        out.par_chunks_mut(ROW_BLOCK * m)
            .enumerate()
            .for_each(|(blk, chunk)| dispatch_block(s, t, blk * ROW_BLOCK, chunk));
    }
    IntMatrix::new(n, m, out)
}
