//! Median-of-repetitions timing for the binattn kernels.
//!
//! Every kernel timed here is the library code path itself. After timing,
//! each run checks one output against an independent oracle so a fast but
//! wrong kernel cannot produce a number.

use std::fmt;
use std::hint::black_box;
use std::io::{self, Write};
use std::str::FromStr;
use std::time::Instant;

use binattn::attention::{binary_attention_fused, reference_attention, AttentionConfig};
use binattn::bitops::{binary_gemm, pack_signs};
use binattn::fidelity::{count_ops, count_reference_ops};
use binattn::gemm::{int8_gemm, naive_f32_gemm};
use binattn::quantize::{binary_quantize, quantize_values};
use binattn::rng::{gaussian_matrix, stream_rng};
use binattn::{DenseMatrix, Error, Result};
use rand::Rng;

pub const MIN_REPS: usize = 5;
pub const MIN_WARMUPS: usize = 2;
const ORACLE_SAMPLES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kernel {
    Noop,
    NaiveF32Gemm,
    Int8Gemm,
    BinaryGemm,
    ReferenceAttention,
    BinaryAttentionFused,
}

impl Kernel {
    pub const ALL: [Kernel; 6] = [
        Kernel::Noop,
        Kernel::NaiveF32Gemm,
        Kernel::Int8Gemm,
        Kernel::BinaryGemm,
        Kernel::ReferenceAttention,
        Kernel::BinaryAttentionFused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Noop => "noop",
            Kernel::NaiveF32Gemm => "naive_f32_gemm",
            Kernel::Int8Gemm => "int8_gemm",
            Kernel::BinaryGemm => "binary_gemm",
            Kernel::ReferenceAttention => "reference_attention",
            Kernel::BinaryAttentionFused => "binary_attention_fused",
        }
    }

    fn is_attention(self) -> bool {
        matches!(
            self,
            Kernel::ReferenceAttention | Kernel::BinaryAttentionFused
        )
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown kernel `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gemm,
    Attention,
}

impl Suite {
    pub fn kernels(self) -> &'static [Kernel] {
        match self {
            Suite::Gemm => &[Kernel::NaiveF32Gemm, Kernel::Int8Gemm, Kernel::BinaryGemm],
            Suite::Attention => &[Kernel::ReferenceAttention, Kernel::BinaryAttentionFused],
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gemm" => Ok(Suite::Gemm),
            "attention" => Ok(Suite::Attention),
            other => Err(Error::Config(format!("unknown suite `{other}`"))),
        }
    }
}

/// `N×d` times `(M×d)ᵀ`; attention kernels require `N = M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub m: usize,
    pub d: usize,
}

impl Shape {
    pub fn square(n: usize, d: usize) -> Self {
        Self { n, m: n, d }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub reps: usize,
    pub warmups: usize,
    pub seed: u64,
    /// Let kernels use the global thread pool instead of one thread.
    pub parallel: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            reps: 9,
            warmups: MIN_WARMUPS,
            seed: 0,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub kernel: Kernel,
    pub shape: Shape,
    pub reps: usize,
    pub warmups: usize,
    pub median_ns: u128,
    pub ops: u64,
    pub ops_per_sec: f64,
    /// Worst deviation seen by the post-run oracle check.
    pub oracle_error: f64,
}

/// Runs `f` `warmups` times untimed, then `reps` times timed; returns the
/// median and the sorted samples in nanoseconds.
pub fn time_median<T>(reps: usize, warmups: usize, mut f: impl FnMut() -> T) -> (u128, Vec<u128>) {
    for _ in 0..warmups {
        black_box(f());
    }
    let mut samples: Vec<u128> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            black_box(f());
            start.elapsed().as_nanos()
        })
        .collect();
    samples.sort_unstable();
    let mid = samples.len() / 2;
    let median = if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        (samples[mid - 1] + samples[mid]) / 2
    };
    (median, samples)
}

struct Inputs {
    a: DenseMatrix,
    b: DenseMatrix,
    v: DenseMatrix,
}

fn inputs(shape: Shape, seed: u64, need_values: bool) -> Inputs {
    let a = gaussian_matrix(&mut stream_rng(seed, 0), shape.n, shape.d);
    let b = gaussian_matrix(&mut stream_rng(seed, 1), shape.m, shape.d);
    let v = if need_values {
        gaussian_matrix(&mut stream_rng(seed, 2), shape.m, shape.d)
    } else {
        DenseMatrix::zeros(0, 0)
    };
    Inputs { a, b, v }
}

fn to_f32(m: &DenseMatrix) -> Vec<f32> {
    m.as_slice().iter().map(|&x| x as f32).collect()
}

fn sample_pairs(seed: u64, n: usize, m: usize) -> Vec<(usize, usize)> {
    let mut rng = stream_rng(seed, 3);
    (0..ORACLE_SAMPLES)
        .map(|_| (rng.random_range(0..n), rng.random_range(0..m)))
        .collect()
}

fn attention_config(shape: Shape) -> AttentionConfig {
    AttentionConfig::new(shape.n, shape.d).with_quantize_pv(true)
}

/// Unquantized attention output for a single query row, straight from the
/// definition: binary scores, softmax, weighted sum.
fn binary_row_oracle(inp: &Inputs, cfg: &AttentionConfig, i: usize) -> Result<Vec<f64>> {
    let sq = binary_quantize(&inp.a)?;
    let sk = binary_quantize(&inp.b)?;
    let d = cfg.d;
    let scores: Vec<f64> = (0..cfg.n)
        .map(|j| {
            let dot: i32 = (0..d)
                .map(|c| sq.bits.sign(i, c) * sk.bits.sign(j, c))
                .sum();
            sq.scale * sk.scale * f64::from(dot) / cfg.temperature
        })
        .collect();
    Ok(softmax_row_apply(&scores, &inp.v))
}

fn reference_row_oracle(inp: &Inputs, cfg: &AttentionConfig, i: usize) -> Vec<f64> {
    let scores: Vec<f64> = (0..cfg.n)
        .map(|j| {
            let dot: f64 = inp
                .a
                .row(i)
                .iter()
                .zip(inp.b.row(j))
                .map(|(x, y)| x * y)
                .sum();
            dot / cfg.temperature
        })
        .collect();
    softmax_row_apply(&scores, &inp.v)
}

fn softmax_row_apply(scores: &[f64], v: &DenseMatrix) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = w.iter().sum();
    (0..v.cols())
        .map(|c| {
            w.iter()
                .enumerate()
                .map(|(j, wj)| wj * v.get(j, c))
                .sum::<f64>()
                / z
        })
        .collect()
}

fn relative_l2(got: &[f64], want: &[f64]) -> f64 {
    let num: f64 = got.iter().zip(want).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = want.iter().map(|b| b * b).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

/// Tolerances applied by the post-run oracle check.
pub fn oracle_tolerance(kernel: Kernel) -> f64 {
    match kernel {
        Kernel::Noop | Kernel::Int8Gemm | Kernel::BinaryGemm => 0.0,
        Kernel::NaiveF32Gemm => 1e-4,
        Kernel::ReferenceAttention => 1e-9,
        Kernel::BinaryAttentionFused => 1e-2,
    }
}

fn bench_one(kernel: Kernel, shape: Shape, opts: &BenchOptions) -> Result<BenchResult> {
    if kernel.is_attention() && shape.n != shape.m {
        return Err(Error::Config(format!(
            "{kernel} needs N = M, got {}x{}",
            shape.n, shape.m
        )));
    }
    let Shape { n, m, d } = shape;
    let inp = inputs(shape, opts.seed, kernel.is_attention());
    let pairs = sample_pairs(opts.seed, n.max(1), m.max(1));
    let gemm_ops = 2 * (n * m * d) as u64;

    let (median_ns, ops, oracle_error) = match kernel {
        Kernel::Noop => {
            let (t, _) = time_median(opts.reps, opts.warmups, || ());
            (t, 0, 0.0)
        }
        Kernel::NaiveF32Gemm => {
            let (a, b) = (to_f32(&inp.a), to_f32(&inp.b));
            let (t, _) = time_median(opts.reps, opts.warmups, || naive_f32_gemm(&a, &b, n, m, d));
            let out = naive_f32_gemm(&a, &b, n, m, d)?;
            let mut worst = 0.0f64;
            for &(i, j) in &pairs {
                let (mut exact, mut mag) = (0.0f64, 0.0f64);
                for c in 0..d {
                    let p = f64::from(a[i * d + c]) * f64::from(b[j * d + c]);
                    exact += p;
                    mag += p.abs();
                }
                worst = worst.max((f64::from(out[i * m + j]) - exact).abs() / mag.max(1.0));
            }
            (t, gemm_ops, worst)
        }
        Kernel::Int8Gemm => {
            let qa = quantize_values(&inp.a);
            let qb = quantize_values(&inp.b);
            let (a, b) = (qa.data(), qb.data());
            let (t, _) = time_median(opts.reps, opts.warmups, || int8_gemm(a, b, n, m, d));
            let out = int8_gemm(a, b, n, m, d)?;
            let worst = pairs
                .iter()
                .map(|&(i, j)| {
                    let exact: i64 = (0..d)
                        .map(|c| i64::from(a[i * d + c]) * i64::from(b[j * d + c]))
                        .sum();
                    (i64::from(out[i * m + j]) - exact).abs() as f64
                })
                .fold(0.0, f64::max);
            (t, gemm_ops, worst)
        }
        Kernel::BinaryGemm => {
            let (s, tb) = (pack_signs(&inp.a), pack_signs(&inp.b));
            let (t, _) = time_median(opts.reps, opts.warmups, || binary_gemm(&s, &tb));
            let out = binary_gemm(&s, &tb)?;
            let worst = pairs
                .iter()
                .map(|&(i, j)| {
                    let exact: i32 = (0..d).map(|c| s.sign(i, c) * tb.sign(j, c)).sum();
                    f64::from((out.get(i, j) - exact).abs())
                })
                .fold(0.0, f64::max);
            (t, gemm_ops, worst)
        }
        Kernel::ReferenceAttention => {
            let cfg = AttentionConfig::new(n, d);
            let (t, _) = time_median(opts.reps, opts.warmups, || {
                reference_attention(&inp.a, &inp.b, &inp.v, &cfg)
            });
            let out = reference_attention(&inp.a, &inp.b, &inp.v, &cfg)?;
            let mut worst = 0.0f64;
            for &(i, _) in &pairs {
                worst = worst.max(relative_l2(
                    out.y.row(i),
                    &reference_row_oracle(&inp, &cfg, i),
                ));
            }
            (t, count_reference_ops(&cfg).counts.matmul_ops(), worst)
        }
        Kernel::BinaryAttentionFused => {
            let cfg = attention_config(shape);
            let (t, _) = time_median(opts.reps, opts.warmups, || {
                binary_attention_fused(&inp.a, &inp.b, &inp.v, &cfg)
            });
            let out = binary_attention_fused(&inp.a, &inp.b, &inp.v, &cfg)?;
            let rows: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
            let (mut got, mut want) = (Vec::new(), Vec::new());
            for &i in &rows {
                got.extend_from_slice(out.y.row(i));
                want.extend(binary_row_oracle(&inp, &cfg, i)?);
            }
            (
                t,
                count_ops(&cfg).counts.matmul_ops(),
                relative_l2(&got, &want),
            )
        }
    };

    if oracle_error > oracle_tolerance(kernel) {
        return Err(Error::Numerical(format!(
            "{kernel} at {n}x{m}x{d} deviates from its oracle by {oracle_error:e}"
        )));
    }
    let secs = median_ns as f64 * 1e-9;
    Ok(BenchResult {
        kernel,
        shape,
        reps: opts.reps,
        warmups: opts.warmups,
        median_ns,
        ops,
        ops_per_sec: if secs > 0.0 { ops as f64 / secs } else { 0.0 },
        oracle_error,
    })
}

/// Times every kernel on every shape, in order.
pub fn run_bench(
    kernels: &[Kernel],
    shapes: &[Shape],
    opts: &BenchOptions,
) -> Result<Vec<BenchResult>> {
    if opts.reps < MIN_REPS {
        return Err(Error::Config(format!(
            "need at least {MIN_REPS} timed repetitions, got {}",
            opts.reps
        )));
    }
    if opts.warmups < MIN_WARMUPS {
        return Err(Error::Config(format!(
            "need at least {MIN_WARMUPS} warmups, got {}",
            opts.warmups
        )));
    }
    let run = || {
        let mut out = Vec::new();
        for &shape in shapes {
            for &kernel in kernels {
                out.push(bench_one(kernel, shape, opts)?);
            }
        }
        Ok(out)
    };
    if opts.parallel {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run)
    }
}

/// `median(baseline) / median(kernel)` for each shape where both ran.
pub fn speedups(results: &[BenchResult], kernel: Kernel, baseline: Kernel) -> Vec<(Shape, f64)> {
    results
        .iter()
        .filter(|r| r.kernel == kernel)
        .filter_map(|r| {
            results
                .iter()
                .find(|b| b.kernel == baseline && b.shape == r.shape)
                .map(|b| (r.shape, b.median_ns as f64 / r.median_ns.max(1) as f64))
        })
        .collect()
}

pub const CSV_HEADER: &str = "kernel,N,M,d,median_ns,ops,ops_per_sec";

pub fn write_csv(results: &[BenchResult], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6e}",
            r.kernel, r.shape.n, r.shape.m, r.shape.d, r.median_ns, r.ops, r.ops_per_sec
        )?;
    }
    Ok(())
}
