//! Gradients for quantization-aware training at toy scale.
//!
//! The sign quantizer gets a hard-tanh straight-through estimator. The
//! student (binary attention) is distilled towards a full-precision teacher
//! with an MSE loss on attention outputs, and the one smooth learnable
//! parameter, a dense pre-softmax bias, gets an exact analytic gradient.

use rayon::prelude::*;

use crate::attention::{
    binary_attention_unfused, binary_scores, reference_attention, AttentionConfig, BiasSpec,
};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteConfig {
    /// Gradients pass only where `|x| ≤ clip_threshold`.
    pub clip_threshold: f64,
}

impl Default for SteConfig {
    fn default() -> Self {
        Self {
            clip_threshold: 1.0,
        }
    }
}

impl SteConfig {
    pub fn new(clip_threshold: f64) -> Result<Self> {
        if clip_threshold.is_nan() || clip_threshold <= 0.0 {
            return Err(Error::Config(format!(
                "clip threshold must be positive, got {clip_threshold}"
            )));
        }
        Ok(Self { clip_threshold })
    }
}

/// Hard-tanh STE: `upstream · 1[|x| ≤ clip]`.
pub fn ste_backward(
    upstream: &DenseMatrix,
    x: &DenseMatrix,
    cfg: SteConfig,
) -> Result<DenseMatrix> {
    x.ensure_shape(upstream.rows(), upstream.cols(), "ste input")?;
    DenseMatrix::new(
        x.rows(),
        x.cols(),
        upstream
            .as_slice()
            .iter()
            .zip(x.as_slice())
            .map(|(&g, &v)| {
                if v.abs() <= cfg.clip_threshold {
                    g
                } else {
                    0.0
                }
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillationLoss {
    pub value: f64,
    /// `∂value/∂student`.
    pub grad: DenseMatrix,
}

/// Mean squared error between student and teacher outputs.
pub fn distillation_loss(student: &DenseMatrix, teacher: &DenseMatrix) -> Result<DistillationLoss> {
    teacher.ensure_shape(student.rows(), student.cols(), "teacher output")?;
    let count = student.as_slice().len() as f64;
    let diff: Vec<f64> = student
        .as_slice()
        .iter()
        .zip(teacher.as_slice())
        .map(|(s, t)| s - t)
        .collect();
    let value = diff.iter().map(|e| e * e).sum::<f64>() / count;
    let grad = diff.into_iter().map(|e| 2.0 * e / count).collect();
    Ok(DistillationLoss {
        value,
        grad: DenseMatrix::new(student.rows(), student.cols(), grad)?,
    })
}

fn require_dense_bias(bias: &DenseMatrix, cfg: &AttentionConfig) -> Result<()> {
    if cfg.quantize_pv {
        return Err(Error::Config(
            "bias gradients need the smooth path (quantize_pv off)".into(),
        ));
    }
    bias.ensure_shape(cfg.n, cfg.n, "dense bias")
}

fn with_dense_bias(cfg: &AttentionConfig, bias: &DenseMatrix) -> AttentionConfig {
    cfg.clone().with_bias(BiasSpec::Dense(bias.clone()))
}

/// Distillation loss of the binary student against `teacher` and its exact
/// gradient with respect to a dense bias.
///
/// Binary scores do not depend on the bias, so only softmax and value
/// aggregation are differentiated: with `G = ∂L/∂Y`,
/// `∂L/∂b_ij = P_ij (g_ij − Σ_k P_ik g_ik)` where `g_ij = G_i · v_j`.
pub fn bias_gradient(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    bias: &DenseMatrix,
    cfg: &AttentionConfig,
    teacher: &DenseMatrix,
) -> Result<(f64, DenseMatrix)> {
    require_dense_bias(bias, cfg)?;
    let n = cfg.n;
    let unbiased = binary_scores(q, k, &cfg.clone().with_bias(BiasSpec::None))?;
    let mut probs = vec![0.0; n * n];
    probs.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, p) in row.iter_mut().enumerate() {
            *p = unbiased.get(i, j) + bias.get(i, j);
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for p in row.iter_mut() {
            *p = (*p - m).exp();
            z += *p;
        }
        for p in row.iter_mut() {
            *p /= z;
        }
    });
    let y = DenseMatrix::from_fn(n, cfg.d, |i, c| {
        (0..n).map(|j| probs[i * n + j] * v.get(j, c)).sum()
    });
    let loss = distillation_loss(&y, teacher)?;
    let mut grad = vec![0.0; n * n];
    grad.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let gi = loss.grad.row(i);
        let p = &probs[i * n..(i + 1) * n];
        let dp: Vec<f64> = (0..n)
            .map(|j| gi.iter().zip(v.row(j)).map(|(a, b)| a * b).sum())
            .collect();
        let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        for (j, g) in row.iter_mut().enumerate() {
            *g = p[j] * (dp[j] - mean);
        }
    });
    Ok((loss.value, DenseMatrix::new(n, n, grad)?))
}

/// Loss of the binary forward pass with `bias` installed as a dense table.
pub fn bias_loss(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    bias: &DenseMatrix,
    cfg: &AttentionConfig,
    teacher: &DenseMatrix,
) -> Result<f64> {
    require_dense_bias(bias, cfg)?;
    let out = binary_attention_unfused(q, k, v, &with_dense_bias(cfg, bias))?;
    Ok(distillation_loss(&out.y, teacher)?.value)
}

/// Relative gap between two gradient estimates, floored to avoid dividing by
/// values that are zero up to rounding.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `max_i |a_i − n_i| / max(‖a‖∞, ‖n‖∞)`, floored like [`relative_error`].
///
/// Components near zero carry only finite-difference rounding noise, so the
/// gap is measured against the scale of the whole gradient.
pub fn gradient_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let peak = |xs: &[f64]| xs.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let gap = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    gap / peak(analytic).max(peak(numeric)).max(1e-8)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

/// Central differences `(f(x + ε e_i) − f(x − ε e_i)) / 2ε` for every entry of `x`.
pub fn numeric_gradient<F>(x: &DenseMatrix, eps: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&DenseMatrix) -> Result<f64> + Sync,
{
    check_eps(eps)?;
    let (rows, cols) = x.shape();
    (0..rows * cols)
        .into_par_iter()
        .map(|idx| {
            let bump = |delta: f64| {
                let mut data = x.as_slice().to_vec();
                data[idx] += delta;
                f(&DenseMatrix::new(rows, cols, data)?)
            };
            Ok((bump(eps)? - bump(-eps)?) / (2.0 * eps))
        })
        .collect()
}

/// [`gradient_relative_error`] of the distillation gradient against central differences.
pub fn grad_check_distillation(
    student: &DenseMatrix,
    teacher: &DenseMatrix,
    eps: f64,
) -> Result<f64> {
    let analytic = distillation_loss(student, teacher)?.grad;
    let numeric = numeric_gradient(student, eps, |s| Ok(distillation_loss(s, teacher)?.value))?;
    Ok(gradient_relative_error(analytic.as_slice(), &numeric))
}

/// [`gradient_relative_error`] of [`bias_gradient`] against central
/// differences of [`bias_loss`], with `teacher` as the distillation target.
pub fn grad_check_bias_with_teacher(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    bias: &DenseMatrix,
    cfg: &AttentionConfig,
    teacher: &DenseMatrix,
    eps: f64,
) -> Result<f64> {
    check_eps(eps)?;
    let (_, analytic) = bias_gradient(q, k, v, bias, cfg, teacher)?;
    let numeric = numeric_gradient(bias, eps, |b| bias_loss(q, k, v, b, cfg, teacher))?;
    Ok(gradient_relative_error(analytic.as_slice(), &numeric))
}

/// [`grad_check_bias_with_teacher`] against the unbiased full-precision
/// attention output. `spec` must be [`BiasSpec::Dense`].
pub fn grad_check_bias(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    spec: &BiasSpec,
    cfg: &AttentionConfig,
    eps: f64,
) -> Result<f64> {
    let BiasSpec::Dense(bias) = spec else {
        return Err(Error::Config("gradient check needs a dense bias".into()));
    };
    let teacher = reference_attention(q, k, v, &cfg.clone().with_bias(BiasSpec::None))?.y;
    grad_check_bias_with_teacher(q, k, v, bias, cfg, &teacher, eps)
}

/// One gradient-descent step on a dense bias.
pub fn bias_descent_step(
    bias: &DenseMatrix,
    grad: &DenseMatrix,
    learning_rate: f64,
) -> Result<DenseMatrix> {
    grad.ensure_shape(bias.rows(), bias.cols(), "bias gradient")?;
    DenseMatrix::new(
        bias.rows(),
        bias.cols(),
        bias.as_slice()
            .iter()
            .zip(grad.as_slice())
            .map(|(b, g)| b - learning_rate * g)
            .collect(),
    )
}
