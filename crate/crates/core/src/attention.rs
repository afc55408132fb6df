//! Softmax attention: the full-precision reference and two binary paths.
//!
//! The binary score between query `i` and key `j` is
//! `S_ij = μ_q μ_k (s_i·t_j) / τ + b_ij`, where `s`, `t` are packed signs and
//! `μ_q`, `μ_k` the mean-absolute scales. The unfused path materializes
//! `S` and `P`; the fused path streams key blocks with a running row max
//! `m`, denominator `l` and accumulator `O`, rescaling by `exp(m_old − m_new)`.

use rayon::prelude::*;

use crate::bitops::{binary_gemm, dot_unchecked};
use crate::error::{Error, Result};
use crate::fidelity::OpCounts;
use crate::quantize::{binary_quantize, quantize_coeff, quantize_coeffs, quantize_values};
use crate::tensor::{DenseMatrix, QuantizedValues};

/// Additive pre-softmax bias.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum BiasSpec {
    #[default]
    None,
    /// Full `N×N` table.
    Dense(DenseMatrix),
    /// `b_ij = offsets[i − j + N − 1]`, `2N − 1` entries.
    Relative1d(Vec<f64>),
    /// Tokens on a `g×g` grid (`N = g²`, token `i` at row `i / g`, column
    /// `i % g`); `b_ij = row_offsets[Δrow + g − 1] + col_offsets[Δcol + g − 1]`.
    Relative2d {
        row_offsets: Vec<f64>,
        col_offsets: Vec<f64>,
    },
}

fn grid_side(n: usize) -> Option<usize> {
    let g = (n as f64).sqrt().round() as usize;
    (g * g == n).then_some(g)
}

impl BiasSpec {
    pub fn is_none(&self) -> bool {
        matches!(self, BiasSpec::None)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        match self {
            BiasSpec::None => Ok(()),
            BiasSpec::Dense(table) => table.ensure_shape(n, n, "dense bias"),
            BiasSpec::Relative1d(offsets) => {
                if offsets.len() != 2 * n - 1 {
                    return Err(Error::shape(format!(
                        "relative1d bias needs {} offsets for N = {n}, got {}",
                        2 * n - 1,
                        offsets.len()
                    )));
                }
                if !finite(offsets) {
                    return Err(Error::Validation("non-finite bias offset".into()));
                }
                Ok(())
            }
            BiasSpec::Relative2d {
                row_offsets,
                col_offsets,
            } => {
                let g = grid_side(n).ok_or_else(|| {
                    Error::shape(format!("relative2d bias needs a square N, got {n}"))
                })?;
                for (name, offsets) in [("row", row_offsets), ("col", col_offsets)] {
                    if offsets.len() != 2 * g - 1 {
                        return Err(Error::shape(format!(
                            "relative2d {name} offsets need {} entries for a {g}x{g} grid, got {}",
                            2 * g - 1,
                            offsets.len()
                        )));
                    }
                    if !finite(offsets) {
                        return Err(Error::Validation("non-finite bias offset".into()));
                    }
                }
                Ok(())
            }
        }
    }

    /// Stored parameters for an `N`-token call; dense grows as `N²`, the
    /// decomposed grid variant as `O(√N)`.
    pub fn parameter_count(&self) -> usize {
        match self {
            BiasSpec::None => 0,
            BiasSpec::Dense(t) => t.rows() * t.cols(),
            BiasSpec::Relative1d(o) => o.len(),
            BiasSpec::Relative2d {
                row_offsets,
                col_offsets,
            } => row_offsets.len() + col_offsets.len(),
        }
    }

    fn lookup(&self, n: usize) -> Result<BiasLookup<'_>> {
        self.validate(n)?;
        Ok(BiasLookup {
            spec: self,
            n,
            side: grid_side(n).unwrap_or(0),
        })
    }
}

/// Evaluates `b_ij` for a validated spec without materializing it.
#[derive(Clone, Copy)]
struct BiasLookup<'a> {
    spec: &'a BiasSpec,
    n: usize,
    side: usize,
}

impl BiasLookup<'_> {
    #[inline]
    fn value(&self, i: usize, j: usize) -> f64 {
        match self.spec {
            BiasSpec::None => 0.0,
            BiasSpec::Dense(t) => t.get(i, j),
            BiasSpec::Relative1d(o) => o[i + self.n - 1 - j],
            BiasSpec::Relative2d {
                row_offsets,
                col_offsets,
            } => {
                let g = self.side;
                row_offsets[i / g + g - 1 - j / g] + col_offsets[i % g + g - 1 - j % g]
            }
        }
    }
}

/// The `N×N` bias matrix for `spec`; zeros for [`BiasSpec::None`].
pub fn materialize_bias(spec: &BiasSpec, n: usize) -> Result<DenseMatrix> {
    let lookup = spec.lookup(n)?;
    Ok(DenseMatrix::from_parts_unchecked(
        n,
        n,
        (0..n * n)
            .map(|idx| lookup.value(idx / n, idx % n))
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub n: usize,
    pub d: usize,
    /// Score divisor, `√d` by default.
    pub temperature: f64,
    pub block_rows: usize,
    pub block_cols: usize,
    pub quantize_pv: bool,
    pub bias: BiasSpec,
}

impl AttentionConfig {
    pub fn new(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            temperature: (d as f64).sqrt(),
            block_rows: n.clamp(1, 64),
            block_cols: n.clamp(1, 64),
            quantize_pv: false,
            bias: BiasSpec::None,
        }
    }

    pub fn with_blocks(mut self, block_rows: usize, block_cols: usize) -> Self {
        self.block_rows = block_rows;
        self.block_cols = block_cols;
        self
    }

    pub fn with_quantize_pv(mut self, on: bool) -> Self {
        self.quantize_pv = on;
        self
    }

    pub fn with_bias(mut self, bias: BiasSpec) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    /// Number of key/value blocks per query block.
    pub fn key_blocks(&self) -> usize {
        self.n.div_ceil(self.block_cols)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::Config(format!(
                "N and d must be positive, got N = {}, d = {}",
                self.n, self.d
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, b) in [
            ("block_rows", self.block_rows),
            ("block_cols", self.block_cols),
        ] {
            if b == 0 || b > self.n {
                return Err(Error::Config(format!(
                    "{name} = {b} outside 1..={}",
                    self.n
                )));
            }
        }
        self.bias.validate(self.n)
    }

    fn check_inputs(&self, q: &DenseMatrix, k: &DenseMatrix, v: &DenseMatrix) -> Result<()> {
        self.validate()?;
        q.ensure_shape(self.n, self.d, "queries")?;
        k.ensure_shape(self.n, self.d, "keys")?;
        v.ensure_shape(self.n, self.d, "values")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub y: DenseMatrix,
    /// Row-normalized attention matrix, when the path materializes it.
    pub probs: Option<DenseMatrix>,
    pub row_max: Option<Vec<f64>>,
    pub row_sum: Option<Vec<f64>>,
}

/// Stable softmax numerators of one score row; returns `(max, sum)`.
fn exp_row(scores: &[f64], out: &mut [f64]) -> (f64, f64) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut l = 0.0;
    for (e, &s) in out.iter_mut().zip(scores) {
        *e = (s - m).exp();
        l += *e;
    }
    (m, l)
}

/// Softmax over materialized scores, `Y = (Σ_j e_ij v_j) / l_i` in f64.
fn softmax_aggregate(
    scores: Vec<f64>,
    v: &DenseMatrix,
    quantize_pv: bool,
) -> Result<AttentionOutput> {
    let (n, d) = v.shape();
    let mut probs = scores;
    let mut y = vec![0.0; n * d];
    let mut row_max = vec![0.0; n];
    let mut row_sum = vec![0.0; n];
    probs
        .par_chunks_mut(n)
        .zip(y.par_chunks_mut(d))
        .zip(row_max.par_iter_mut().zip(row_sum.par_iter_mut()))
        .for_each(|((row, yi), (mi, li))| {
            let scores = row.to_vec();
            let (m, l) = exp_row(&scores, row);
            *mi = m;
            *li = l;
            if !quantize_pv {
                for (j, &e) in row.iter().enumerate() {
                    for (acc, &vj) in yi.iter_mut().zip(v.row(j)) {
                        *acc += e * vj;
                    }
                }
                for acc in yi.iter_mut() {
                    *acc /= l;
                }
            }
            for e in row.iter_mut() {
                *e /= l;
            }
        });
    let probs = DenseMatrix::from_parts_unchecked(n, n, probs);
    if quantize_pv {
        let pq = quantize_coeffs(&probs)?;
        let vq = quantize_values(v);
        let scales = vq.channel_scales();
        y.par_chunks_mut(d).enumerate().for_each(|(i, yi)| {
            let mut acc = vec![0i32; d];
            for (j, &p) in pq.row(i).iter().enumerate() {
                let p = i32::from(p);
                for (a, &x) in acc.iter_mut().zip(vq.row(j)) {
                    *a += p * i32::from(x);
                }
            }
            for ((out, a), delta) in yi.iter_mut().zip(acc).zip(scales) {
                *out = delta / 255.0 * f64::from(a);
            }
        });
    }
    Ok(AttentionOutput {
        y: DenseMatrix::from_parts_unchecked(n, d, y),
        probs: Some(probs),
        row_max: Some(row_max),
        row_sum: Some(row_sum),
    })
}

/// Full-precision softmax attention, `softmax(QKᵀ/τ + B)·V`, in f64.
///
/// `cfg.quantize_pv` is ignored.
pub fn reference_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    cfg.check_inputs(q, k, v)?;
    let n = cfg.n;
    let bias = cfg.bias.lookup(n)?;
    let mut scores = vec![0.0; n * n];
    scores.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let qi = q.row(i);
        for (j, s) in row.iter_mut().enumerate() {
            let dot: f64 = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
            *s = dot / cfg.temperature + bias.value(i, j);
        }
    });
    softmax_aggregate(scores, v, false)
}

/// Pre-softmax binary scores `μ_q μ_k (s·t)/τ + b` as an `N×N` matrix.
pub fn binary_scores(
    q: &DenseMatrix,
    k: &DenseMatrix,
    cfg: &AttentionConfig,
) -> Result<DenseMatrix> {
    cfg.validate()?;
    q.ensure_shape(cfg.n, cfg.d, "queries")?;
    k.ensure_shape(cfg.n, cfg.d, "keys")?;
    let sq = binary_quantize(q)?;
    let sk = binary_quantize(k)?;
    let dots = binary_gemm(&sq.bits, &sk.bits)?;
    let factor = sq.scale * sk.scale / cfg.temperature;
    let n = cfg.n;
    let bias = cfg.bias.lookup(n)?;
    Ok(DenseMatrix::from_parts_unchecked(
        n,
        n,
        dots.as_slice()
            .iter()
            .enumerate()
            .map(|(idx, &dot)| factor * f64::from(dot) + bias.value(idx / n, idx % n))
            .collect(),
    ))
}

/// Binary attention with materialized scores and probabilities.
///
/// With `quantize_pv`, `y_i = Σ_j (δ_v/255) round(255·P_ij) ṽ_j` using an
/// integer accumulator; otherwise `Y = P·V` in f64.
pub fn binary_attention_unfused(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    cfg.check_inputs(q, k, v)?;
    let scores = binary_scores(q, k, cfg)?;
    softmax_aggregate(scores.into_vec(), v, cfg.quantize_pv)
}

/// Per-entry allowance for the output change caused by quantizing `P` and
/// `V`: `d · max_c δ_c · (1/510 + 1/254)`.
///
/// Sized for typical inputs. A row that spreads its weight evenly over many
/// large values can exceed it; the worst case grows with `N`, not `d`.
pub fn pv_quantization_bound(d: usize, values: &QuantizedValues) -> f64 {
    let max_delta = values.channel_scales().iter().copied().fold(0.0, f64::max);
    d as f64 * max_delta * (1.0 / 510.0 + 1.0 / 254.0)
}

/// Tiled single-pass binary attention.
pub fn binary_attention_fused(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    binary_attention_fused_counted(q, k, v, cfg).map(|(out, _)| out)
}

/// [`binary_attention_fused`] that also tallies the operations each block performs.
pub fn binary_attention_fused_counted(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    cfg: &AttentionConfig,
) -> Result<(AttentionOutput, OpCounts)> {
    cfg.check_inputs(q, k, v)?;
    let (n, d) = (cfg.n, cfg.d);
    let (br, bc) = (cfg.block_rows, cfg.block_cols);
    let quantize = cfg.quantize_pv;
    let with_bias = !cfg.bias.is_none();

    let sq = binary_quantize(q)?;
    let sk = binary_quantize(k)?;
    let vq = quantize.then(|| quantize_values(v));
    let factor = sq.scale * sk.scale / cfg.temperature;
    let bias = cfg.bias.lookup(n)?;

    let mut setup = OpCounts {
        // |x| and a running sum per entry of Q and K
        quant_flops: 4 * (n * d) as u64,
        ..OpCounts::default()
    };
    if quantize {
        // |v| for the channel max, then divide and round
        setup.quant_flops += 2 * (n * d) as u64;
    }

    let mut y = vec![0.0; n * d];
    let mut row_max = vec![0.0; n];
    let mut row_sum = vec![0.0; n];
    let block_counts: Vec<OpCounts> = y
        .par_chunks_mut(br * d)
        .zip(row_max.par_chunks_mut(br).zip(row_sum.par_chunks_mut(br)))
        .enumerate()
        .map(|(blk, (y_blk, (m_blk, l_blk)))| {
            let i0 = blk * br;
            let rows = m_blk.len();
            let mut ops = OpCounts::default();
            let mut m = vec![f64::NEG_INFINITY; rows];
            let mut l = vec![0.0; rows];
            let mut o = vec![0.0; rows * d];
            let mut s = vec![0.0; bc];
            let mut acc_f = vec![0.0; d];
            let mut acc_i = vec![0i32; d];

            for j0 in (0..n).step_by(bc) {
                let cols = bc.min(n - j0);
                let (r64, c64, d64) = (rows as u64, cols as u64, d as u64);
                ops.bops += 2 * r64 * c64 * d64;
                ops.score_flops += r64 * c64;
                if with_bias {
                    ops.bias_flops += r64 * c64;
                }
                ops.max_flops += r64 * c64;
                ops.exp_flops += r64 * c64 + r64;
                ops.sum_flops += r64 * c64 + 2 * r64;
                ops.rescale_flops += 2 * r64 * d64;
                if quantize {
                    ops.int8_ops += 2 * r64 * c64 * d64;
                    ops.quant_flops += r64 * c64;
                } else {
                    ops.pv_flops += 2 * r64 * c64 * d64;
                }

                for r in 0..rows {
                    let i = i0 + r;
                    let qi = sq.bits.row(i);
                    let s = &mut s[..cols];
                    for (c, sc) in s.iter_mut().enumerate() {
                        let dot = dot_unchecked(qi, sk.bits.row(j0 + c));
                        *sc = factor * f64::from(dot) + bias.value(i, j0 + c);
                    }
                    let m_prev = m[r];
                    let m_new = s.iter().copied().fold(m_prev, f64::max);
                    let mut rowsum = 0.0;
                    for sc in s.iter_mut() {
                        *sc = (*sc - m_new).exp();
                        rowsum += *sc;
                    }
                    let correction = (m_prev - m_new).exp();
                    l[r] = correction * l[r] + rowsum;
                    m[r] = m_new;

                    let o_row = &mut o[r * d..(r + 1) * d];
                    match &vq {
                        Some(vq) => {
                            acc_i.fill(0);
                            for (c, &p) in s.iter().enumerate() {
                                let p = i32::from(quantize_coeff(p));
                                for (a, &x) in acc_i.iter_mut().zip(vq.row(j0 + c)) {
                                    *a += p * i32::from(x);
                                }
                            }
                            for (out, &a) in o_row.iter_mut().zip(&acc_i) {
                                *out = correction * *out + f64::from(a);
                            }
                        }
                        None => {
                            acc_f.fill(0.0);
                            for (c, &p) in s.iter().enumerate() {
                                for (a, &x) in acc_f.iter_mut().zip(v.row(j0 + c)) {
                                    *a += p * x;
                                }
                            }
                            for (out, &a) in o_row.iter_mut().zip(&acc_f) {
                                *out = correction * *out + a;
                            }
                        }
                    }
                }
            }

            ops.normalize_flops += (rows * d) as u64;
            for r in 0..rows {
                let o_row = &o[r * d..(r + 1) * d];
                let y_row = &mut y_blk[r * d..(r + 1) * d];
                match &vq {
                    Some(vq) => {
                        for ((out, &acc), delta) in
                            y_row.iter_mut().zip(o_row).zip(vq.channel_scales())
                        {
                            *out = acc / l[r] / 255.0 * delta;
                        }
                    }
                    None => {
                        for (out, &acc) in y_row.iter_mut().zip(o_row) {
                            *out = acc / l[r];
                        }
                    }
                }
            }
            if quantize {
                ops.normalize_flops += (rows * d) as u64;
            }
            m_blk.copy_from_slice(&m);
            l_blk.copy_from_slice(&l);
            ops
        })
        .collect();

    let counts = block_counts.iter().fold(setup, |acc, b| acc + *b);
    Ok((
        AttentionOutput {
            y: DenseMatrix::from_parts_unchecked(n, d, y),
            probs: None,
            row_max: Some(row_max),
            row_sum: Some(row_sum),
        },
        counts,
    ))
}
