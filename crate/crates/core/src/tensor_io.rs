//! `BATF` tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | field   | size             |
//! |---------|------------------|
//! | magic   | 4 bytes, `BATF`  |
//! | version | u32, currently 1 |
//! | dtype   | u8               |
//! | ndim    | u8, always 2     |
//! | dims    | ndim × u64       |
//! | payload | row-major        |
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = int8 values, 3 = uint8 coefficients,
//! 4 = packed signs. The int8 payload is followed by one f64 scale per column.
//! Packed-sign rows are padded to whole u64 words and the pad bits must be zero.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::quantize::QuantizedCoeffs;
use crate::tensor::{words_for, BitMatrix, DenseMatrix, Precision, QuantizedValues};

pub const MAGIC: &[u8; 4] = b"BATF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    Int8 = 2,
    Uint8 = 3,
    PackedBit = 4,
}

impl TryFrom<u8> for DType {
    type Error = Error;

    fn try_from(code: u8) -> Result<Self> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::Int8,
            3 => DType::Uint8,
            4 => DType::PackedBit,
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        })
    }
}

/// Any tensor that can live in a `BATF` file.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Dense(DenseMatrix),
    Bits(BitMatrix),
    Values(QuantizedValues),
    Coeffs(QuantizedCoeffs),
}

impl Tensor {
    pub fn dtype(&self) -> DType {
        match self {
            Tensor::Dense(m) if m.precision() == Precision::F32 => DType::F32,
            Tensor::Dense(_) => DType::F64,
            Tensor::Bits(_) => DType::PackedBit,
            Tensor::Values(_) => DType::Int8,
            Tensor::Coeffs(_) => DType::Uint8,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Tensor::Dense(m) => m.shape(),
            Tensor::Bits(b) => (b.rows(), b.cols()),
            Tensor::Values(v) => (v.rows(), v.cols()),
            Tensor::Coeffs(c) => (c.rows(), c.cols()),
        }
    }

    pub fn into_dense(self) -> Result<DenseMatrix> {
        match self {
            Tensor::Dense(m) => Ok(m),
            other => Err(Error::Format(format!(
                "expected a real-valued tensor, found {:?}",
                other.dtype()
            ))),
        }
    }
}

impl From<DenseMatrix> for Tensor {
    fn from(m: DenseMatrix) -> Self {
        Tensor::Dense(m)
    }
}

impl From<BitMatrix> for Tensor {
    fn from(b: BitMatrix) -> Self {
        Tensor::Bits(b)
    }
}

impl From<QuantizedValues> for Tensor {
    fn from(v: QuantizedValues) -> Self {
        Tensor::Values(v)
    }
}

impl From<QuantizedCoeffs> for Tensor {
    fn from(c: QuantizedCoeffs) -> Self {
        Tensor::Coeffs(c)
    }
}

/// Serializes a tensor into its exact `BATF` byte image.
pub fn encode(tensor: &Tensor) -> Result<Vec<u8>> {
    let (rows, cols) = tensor.shape();
    let mut out = Vec::with_capacity(26 + rows * cols * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(tensor.dtype() as u8);
    out.push(2);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    match tensor {
        Tensor::Dense(m) => {
            if let Some(v) = m.as_slice().iter().find(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("non-finite entry {v}")));
            }
            match m.precision() {
                Precision::F32 => {
                    for &v in m.as_slice() {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                Precision::F64 => {
                    for &v in m.as_slice() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Tensor::Bits(b) => {
            for &w in b.words() {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        Tensor::Values(v) => {
            out.extend(v.data().iter().map(|&x| x as u8));
            for &s in v.channel_scales() {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        Tensor::Coeffs(c) => out.extend_from_slice(c.data()),
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated file: wanted {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

fn payload_len(count: usize, width: usize) -> Result<usize> {
    count
        .checked_mul(width)
        .ok_or_else(|| Error::Format("payload size overflows".into()))
}

/// Parses a `BATF` byte image.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(cur.array()?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = DType::try_from(cur.array::<1>()?[0])?;
    let ndim = cur.array::<1>()?[0];
    if ndim != 2 {
        return Err(Error::Format(format!("expected 2 dims, found {ndim}")));
    }
    let mut dims = [0usize; 2];
    for dim in &mut dims {
        *dim = usize::try_from(u64::from_le_bytes(cur.array()?))
            .map_err(|_| Error::Format("dimension does not fit in usize".into()))?;
    }
    let [rows, cols] = dims;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("element count overflows".into()))?;

    let tensor = match dtype {
        DType::F32 => {
            let raw = cur.take(payload_len(count, 4)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::Dense(DenseMatrix::from_f32(rows, cols, data).map_err(to_format)?)
        }
        DType::F64 => {
            let raw = cur.take(payload_len(count, 8)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::Dense(DenseMatrix::new(rows, cols, data).map_err(to_format)?)
        }
        DType::Int8 => {
            let data = cur.take(count)?.iter().map(|&b| b as i8).collect();
            let scales = cur
                .take(payload_len(cols, 8)?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::Values(QuantizedValues::new(rows, cols, data, scales).map_err(to_format)?)
        }
        DType::Uint8 => {
            let data = cur.take(count)?.to_vec();
            Tensor::Coeffs(QuantizedCoeffs::new(rows, cols, data).map_err(to_format)?)
        }
        DType::PackedBit => {
            let words = payload_len(rows, words_for(cols))?;
            let raw = cur.take(payload_len(words, 8)?)?;
            let words = raw
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::Bits(BitMatrix::from_words(rows, cols, words).map_err(to_format)?)
        }
    };
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }
    Ok(tensor)
}

fn to_format(err: Error) -> Error {
    match err {
        Error::Format(_) => err,
        other => Error::Format(other.to_string()),
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let bytes = encode(tensor)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}
