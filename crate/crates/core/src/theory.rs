//! Arcsine law for sign correlations, checked by Monte Carlo.
//!
//! For a zero-mean Gaussian `z = (q, k)` with covariance `Σ`, the signs
//! `s = sign(q)`, `t = sign(k)` satisfy `E[s tᵀ] = (2/π) arcsin C` where
//! `C = D_q^{-1/2} Σ_qk D_k^{-1/2}`.

use std::f64::consts::FRAC_2_PI;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::bitops::{hamming_distance, pack_signs, popcount_dot};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::DenseMatrix;

const SYMMETRY_TOL: f64 = 1e-12;
const EIGEN_TOL: f64 = 1e-10;
const CORR_SLACK: f64 = 1e-12;
const JITTER: f64 = 1e-12;
/// Samples per independent random stream.
pub const CHUNK_SAMPLES: usize = 1 << 16;

/// `(2/π) arcsin(c)` elementwise; entries within 1e-12 outside `[-1, 1]` are clamped.
pub fn arcsine_correlation(c: &DenseMatrix) -> Result<DenseMatrix> {
    let data = c
        .as_slice()
        .iter()
        .map(|&x| {
            if x.abs() > 1.0 + CORR_SLACK {
                return Err(Error::Range(format!("correlation {x} outside [-1, 1]")));
            }
            Ok(FRAC_2_PI * x.clamp(-1.0, 1.0).asin())
        })
        .collect::<Result<Vec<_>>>()?;
    DenseMatrix::new(c.rows(), c.cols(), data)
}

/// Joint covariance of a query/key pair, each of dimension `d`.
#[derive(Debug, Clone)]
pub struct JointGaussianSpec {
    d: usize,
    sigma: DenseMatrix,
}

impl JointGaussianSpec {
    /// Validates symmetry, positive semidefiniteness and `|C_ij| ≤ 1`.
    pub fn new(d: usize, sigma: DenseMatrix) -> Result<Self> {
        if d == 0 {
            return Err(Error::shape("dimension must be positive"));
        }
        sigma.ensure_shape(2 * d, 2 * d, "covariance")?;
        let n = 2 * d;
        for i in 0..n {
            for j in 0..i {
                if (sigma.get(i, j) - sigma.get(j, i)).abs() > SYMMETRY_TOL {
                    return Err(Error::Validation(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let eig = DMatrix::from_row_slice(n, n, sigma.as_slice()).symmetric_eigenvalues();
        if let Some(low) = eig.iter().copied().find(|&e| e < -EIGEN_TOL) {
            return Err(Error::Validation(format!(
                "covariance has negative eigenvalue {low}"
            )));
        }
        let spec = Self { d, sigma };
        for i in 0..d {
            if spec.sigma.get(i, i) <= 0.0 || spec.sigma.get(d + i, d + i) <= 0.0 {
                return Err(Error::Validation(format!(
                    "variable {i} has zero variance; its correlation is undefined"
                )));
            }
        }
        let c = spec.correlation();
        if let Some(x) = c.as_slice().iter().find(|x| x.abs() > 1.0 + CORR_SLACK) {
            return Err(Error::Validation(format!("correlation {x} exceeds 1")));
        }
        Ok(spec)
    }

    /// `Σ = [[I, ρI], [ρI, I]]`: each query channel correlates with its key channel only.
    pub fn paired(d: usize, rho: f64) -> Result<Self> {
        let sigma = DenseMatrix::from_fn(2 * d, 2 * d, |i, j| {
            if i == j {
                1.0
            } else if i % d == j % d {
                rho
            } else {
                0.0
            }
        });
        Self::new(d, sigma)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn covariance(&self) -> &DenseMatrix {
        &self.sigma
    }

    /// `C = D_q^{-1/2} Σ_qk D_k^{-1/2}`.
    pub fn correlation(&self) -> DenseMatrix {
        let d = self.d;
        DenseMatrix::from_fn(d, d, |i, j| {
            self.sigma.get(i, d + j)
                / (self.sigma.get(i, i).sqrt() * self.sigma.get(d + j, d + j).sqrt())
        })
    }

    /// Analytic `E[s tᵀ]`.
    pub fn expected_sign_covariance(&self) -> DenseMatrix {
        arcsine_correlation(&self.correlation()).expect("validated correlation")
    }

    /// Lower-triangular `L` with `L Lᵀ = Σ` (up to jitter).
    pub fn cholesky(&self) -> Result<Vec<f64>> {
        semidefinite_cholesky(&self.sigma, 0.0)
            .or_else(|_| semidefinite_cholesky(&self.sigma, JITTER))
            .map_err(|e| Error::Numerical(format!("covariance factorization failed: {e}")))
    }
}

/// Cholesky of a PSD matrix, writing zero columns for pivots that vanish
/// to within rounding so exactly singular covariances (such as `q = k`)
/// factor without perturbation. `jitter` is added to the diagonal.
fn semidefinite_cholesky(a: &DenseMatrix, jitter: f64) -> Result<Vec<f64>> {
    let n = a.rows();
    let scale = (0..n).map(|i| a.get(i, i)).fold(0.0, f64::max).max(1.0);
    let tol = EIGEN_TOL * scale;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut pivot = a.get(j, j) + jitter;
        for p in 0..j {
            pivot -= l[j * n + p] * l[j * n + p];
        }
        if pivot < -tol {
            return Err(Error::Numerical(format!("negative pivot {pivot} at {j}")));
        }
        if pivot <= tol {
            for i in j + 1..n {
                let mut off = a.get(i, j);
                for p in 0..j {
                    off -= l[i * n + p] * l[j * n + p];
                }
                if off.abs() > tol.sqrt() {
                    return Err(Error::Numerical(format!(
                        "zero pivot at {j} with residual {off} in row {i}"
                    )));
                }
            }
            continue;
        }
        let diag = pivot.sqrt();
        l[j * n + j] = diag;
        for i in j + 1..n {
            let mut off = a.get(i, j);
            for p in 0..j {
                off -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = off / diag;
        }
    }
    Ok(l)
}

fn draw(l: &[f64], n: usize, rng: &mut crate::rng::StreamRng, g: &mut [f64], z: &mut [f64]) {
    for x in g.iter_mut() {
        *x = StandardNormal.sample(rng);
    }
    for i in 0..n {
        let row = &l[i * n..i * n + i + 1];
        z[i] = row.iter().zip(&g[..=i]).map(|(a, b)| a * b).sum();
    }
}

fn chunk_ranges(samples: usize) -> Vec<(u64, usize)> {
    (0..samples.div_ceil(CHUNK_SAMPLES))
        .map(|c| (c as u64, CHUNK_SAMPLES.min(samples - c * CHUNK_SAMPLES)))
        .collect()
}

/// Empirical `E[sign(q) sign(k)ᵀ]` over `samples` draws.
///
/// Chunk `c` of [`CHUNK_SAMPLES`] draws uses random stream `c` of `seed`.
/// Chunk results are exact integer sums, so the estimate is identical for
/// any thread count.
pub fn monte_carlo_sign_covariance(
    spec: &JointGaussianSpec,
    samples: usize,
    seed: u64,
) -> Result<DenseMatrix> {
    if samples == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let d = spec.d;
    let n = 2 * d;
    let l = spec.cholesky()?;
    let totals = chunk_ranges(samples)
        .into_par_iter()
        .map(|(stream, count)| {
            let mut rng = stream_rng(seed, stream);
            let (mut g, mut z) = (vec![0.0; n], vec![0.0; n]);
            let mut sums = vec![0i64; d * d];
            for _ in 0..count {
                draw(&l, n, &mut rng, &mut g, &mut z);
                for i in 0..d {
                    let si = z[i] >= 0.0;
                    for j in 0..d {
                        sums[i * d + j] += if si == (z[d + j] >= 0.0) { 1 } else { -1 };
                    }
                }
            }
            sums
        })
        .reduce(
            || vec![0i64; d * d],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    Ok(DenseMatrix::from_parts_unchecked(
        d,
        d,
        totals.iter().map(|&s| s as f64 / samples as f64).collect(),
    ))
}

/// Empirical covariance of the raw draws `z`, for checking the sampler itself.
pub fn empirical_covariance(
    spec: &JointGaussianSpec,
    samples: usize,
    seed: u64,
) -> Result<DenseMatrix> {
    if samples == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let n = 2 * spec.d;
    let l = spec.cholesky()?;
    let partial: Vec<Vec<f64>> = chunk_ranges(samples)
        .into_par_iter()
        .map(|(stream, count)| {
            let mut rng = stream_rng(seed, stream);
            let (mut g, mut z) = (vec![0.0; n], vec![0.0; n]);
            let mut sums = vec![0.0; n * n];
            for _ in 0..count {
                draw(&l, n, &mut rng, &mut g, &mut z);
                for i in 0..n {
                    for j in 0..n {
                        sums[i * n + j] += z[i] * z[j];
                    }
                }
            }
            sums
        })
        .collect();
    let mut total = vec![0.0; n * n];
    for chunk in partial {
        for (t, x) in total.iter_mut().zip(chunk) {
            *t += x;
        }
    }
    Ok(DenseMatrix::from_parts_unchecked(
        n,
        n,
        total.into_iter().map(|s| s / samples as f64).collect(),
    ))
}

/// Random covariance `A Aᵀ / (2d)` with `A` a `2d × 2d` standard Gaussian.
pub fn random_psd_spec(d: usize, seed: u64) -> Result<JointGaussianSpec> {
    let n = 2 * d;
    let a = crate::rng::gaussian_matrix(&mut stream_rng(seed, u64::MAX), n, n);
    let sigma = DenseMatrix::from_fn(n, n, |i, j| {
        a.row(i)
            .iter()
            .zip(a.row(j))
            .map(|(x, y)| x * y)
            .sum::<f64>()
            / n as f64
    });
    JointGaussianSpec::new(d, sigma)
}

/// Largest deviations found by [`verify_geometry_identities`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeometryReport {
    pub trials: usize,
    /// `‖q − k‖² − (‖q‖² + ‖k‖² − 2 q·k)`, relative to `‖q‖² + ‖k‖²`.
    pub euclidean_expansion: f64,
    /// Dot of L2-normalized rows against `q·k / (‖q‖‖k‖)`.
    pub cosine: f64,
    /// `s·t` against `d − 2·hamming(s, t)`.
    pub hamming_identity: f64,
    /// `s·t` against `d·cos θ` of the unpacked ±1 vectors.
    pub binary_cosine: f64,
    pub skipped_zero_norm: usize,
}

impl GeometryReport {
    pub fn max_deviation(&self) -> f64 {
        self.euclidean_expansion
            .max(self.cosine)
            .max(self.hamming_identity)
            .max(self.binary_cosine)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks the distance/direction identities on `trials` random row pairs.
pub fn verify_geometry_identities(
    q: &DenseMatrix,
    k: &DenseMatrix,
    trials: usize,
    seed: u64,
) -> Result<GeometryReport> {
    use rand::Rng;

    if q.cols() != k.cols() {
        return Err(Error::shape(format!(
            "query width {} differs from key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if q.rows() == 0 || k.rows() == 0 || q.cols() == 0 {
        return Err(Error::shape("need nonempty query and key matrices"));
    }
    let d = q.cols();
    let s = pack_signs(q);
    let t = pack_signs(k);
    let (s_dense, t_dense) = (s.unpack(), t.unpack());
    let mut rng = stream_rng(seed, 0);
    let mut report = GeometryReport {
        trials,
        ..GeometryReport::default()
    };
    for _ in 0..trials {
        let i = rng.random_range(0..q.rows());
        let j = rng.random_range(0..k.rows());
        let (qi, kj) = (q.row(i), k.row(j));

        let diff: Vec<f64> = qi.iter().zip(kj).map(|(a, b)| a - b).collect();
        let (nq2, nk2, qk) = (dot(qi, qi), dot(kj, kj), dot(qi, kj));
        let lhs = dot(&diff, &diff);
        let rhs = nq2 + nk2 - 2.0 * qk;
        let denom = (nq2 + nk2).max(f64::MIN_POSITIVE);
        report.euclidean_expansion = report.euclidean_expansion.max((lhs - rhs).abs() / denom);

        if nq2 == 0.0 || nk2 == 0.0 {
            report.skipped_zero_norm += 1;
        } else {
            let (nq, nk) = (nq2.sqrt(), nk2.sqrt());
            let qn: Vec<f64> = qi.iter().map(|x| x / nq).collect();
            let kn: Vec<f64> = kj.iter().map(|x| x / nk).collect();
            let cos = qk / (nq * nk);
            report.cosine = report.cosine.max((dot(&qn, &kn) - cos).abs());
        }

        let pop = popcount_dot(s.row(i), t.row(j))?;
        let ham = hamming_distance(s.row(i), t.row(j))? as i64;
        report.hamming_identity = report
            .hamming_identity
            .max((pop.dot() - (d as i64 - 2 * ham)).abs() as f64);
        let (si, tj) = (s_dense.row(i), t_dense.row(j));
        let cos_binary = dot(si, tj) / (dot(si, si).sqrt() * dot(tj, tj).sqrt());
        report.binary_cosine = report
            .binary_cosine
            .max((pop.dot() as f64 - d as f64 * cos_binary).abs());
    }
    Ok(report)
}
