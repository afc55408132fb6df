//! Small seeded instances of every invariant the library promises.
//!
//! Output never includes timings, so two runs with the same seed print the
//! same bytes regardless of thread count.

use binattn::bitops::{binary_gemm, hamming_distance, pack_signs, xnor_popcount_dot};
use binattn::fidelity::{count_ops, precision_at_k};
use binattn::qat::{
    bias_descent_step, bias_gradient, bias_loss, grad_check_bias, grad_check_distillation,
    ste_backward, SteConfig,
};
use binattn::quantize::{binary_quantize, quantize_coeffs, quantize_values};
use binattn::rng::{gaussian_matrix, stream_rng, StreamRng};
use binattn::tensor_io::{decode, encode};
use binattn::theory::{
    monte_carlo_sign_covariance, random_psd_spec, verify_geometry_identities, JointGaussianSpec,
};
use binattn::{
    attention_fidelity, binary_attention_fused, binary_attention_fused_counted,
    binary_attention_unfused, pv_quantization_bound, reference_attention, AttentionConfig,
    BiasSpec, DenseMatrix, Result, Tensor,
};
use rand::Rng;

use crate::commands::theorem_tolerance;
use crate::inputs::fmt_e;
use crate::report::Report;

const MC_SAMPLES: usize = 200_000;

fn sign(x: f64) -> i32 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

fn gemm_exact(r: &mut Report, rng: &mut StreamRng) -> Result<()> {
    let dims = [1, 63, 64, 65, 128, 257];
    let mut mismatches = 0usize;
    let instances = 24;
    for t in 0..instances {
        let (n, m, d) = (
            rng.random_range(1..=48),
            rng.random_range(1..=48),
            dims[t % dims.len()],
        );
        let a = gaussian_matrix(rng, n, d);
        let b = gaussian_matrix(rng, m, d);
        let got = binary_gemm(&pack_signs(&a), &pack_signs(&b))?;
        for i in 0..n {
            for j in 0..m {
                let want: i32 = (0..d).map(|c| sign(a.get(i, c)) * sign(b.get(j, c))).sum();
                mismatches += usize::from(got.get(i, j) != want);
            }
        }
    }
    r.check(
        "binary gemm",
        format!("{instances} instances, {mismatches} mismatches"),
        mismatches == 0,
    );
    Ok(())
}

fn hamming(r: &mut Report, rng: &mut StreamRng) -> Result<()> {
    let mut violations = 0usize;
    let mut pairs = 0usize;
    let mut identity =
        |s: &binattn::BitMatrix, t: &binattn::BitMatrix, i: usize, j: usize| -> Result<()> {
            let d = s.cols() as i64;
            let dot = xnor_popcount_dot(s.row(i), t.row(j))?;
            let h = hamming_distance(s.row(i), t.row(j))? as i64;
            let direct: i64 = (0..s.cols())
                .map(|c| i64::from(s.sign(i, c) * t.sign(j, c)))
                .sum();
            violations += usize::from(dot != d - 2 * h || dot != direct);
            pairs += 1;
            Ok(())
        };
    for d in 1..=5usize {
        let all = DenseMatrix::from_fn(1 << d, d, |i, c| if i >> c & 1 == 1 { 1.0 } else { -1.0 });
        let bits = pack_signs(&all);
        for i in 0..bits.rows() {
            for j in 0..bits.rows() {
                identity(&bits, &bits, i, j)?;
            }
        }
    }
    for _ in 0..200 {
        let d = rng.random_range(1..=1024);
        let bits = pack_signs(&gaussian_matrix(rng, 2, d));
        identity(&bits, &bits, 0, 1)?;
    }
    r.check(
        "hamming identity",
        format!("{pairs} pairs, {violations} violations"),
        violations == 0,
    );
    Ok(())
}

fn tensor_files(r: &mut Report, rng: &mut StreamRng) -> Result<()> {
    let dense = gaussian_matrix(rng, 7, 65);
    let f32s = DenseMatrix::from_f32(7, 65, dense.as_slice().iter().map(|&x| x as f32).collect())?;
    let probs = DenseMatrix::from_fn(3, 5, |i, j| ((i + j) % 4) as f64 / 4.0);
    let tensors = [
        Tensor::Dense(dense.clone()),
        Tensor::Dense(f32s),
        Tensor::Bits(pack_signs(&dense)),
        Tensor::Values(quantize_values(&dense)),
        Tensor::Coeffs(quantize_coeffs(&probs)?),
    ];
    let mut failures = 0usize;
    for t in &tensors {
        let bytes = encode(t)?;
        let back = decode(&bytes)?;
        failures += usize::from(back != *t || encode(&back)? != bytes);
    }
    r.check(
        "tensor file round trip",
        format!("{} dtypes, {failures} failures", tensors.len()),
        failures == 0,
    );
    Ok(())
}

fn quantizers(r: &mut Report, rng: &mut StreamRng) -> Result<()> {
    let p = DenseMatrix::new(16, 64, (0..16 * 64).map(|_| rng.random::<f64>()).collect())?;
    let coeff_err = max_abs_diff(quantize_coeffs(&p)?.dequantize().as_slice(), p.as_slice());
    r.check(
        "coefficient quantizer",
        format!("max error {} <= 1/510", fmt_e(coeff_err)),
        coeff_err <= 1.0 / 510.0 + f64::EPSILON,
    );

    let v = gaussian_matrix(rng, 32, 16);
    let vq = quantize_values(&v);
    let back = binattn::dequantize_values(&vq);
    let mut worst = 0.0f64;
    for i in 0..v.rows() {
        for c in 0..v.cols() {
            let half = vq.channel_scales()[c] / 2.0;
            worst = worst.max((back.get(i, c) - v.get(i, c)).abs() / half);
        }
    }
    r.check(
        "value quantizer",
        format!("max error / (delta/2) = {worst:.4}"),
        worst <= 1.0 + 1e-12,
    );

    let x = gaussian_matrix(rng, 12, 24);
    let sb = binary_quantize(&x)?;
    let err = |mu: f64| -> f64 {
        x.as_slice()
            .iter()
            .map(|&v| (v - mu * f64::from(sign(v))).powi(2))
            .sum()
    };
    let best = err(sb.scale);
    let beaten = (0..100)
        .filter(|_| err(rng.random_range(0.0..2.0 * sb.scale)) < best)
        .count();
    r.check(
        "binary scale",
        format!("mean |x| beaten by {beaten} of 100 random scales"),
        beaten == 0,
    );
    Ok(())
}

fn arcsine(r: &mut Report, seed: u64) -> Result<()> {
    let spec = JointGaussianSpec::paired(1, 0.5)?;
    let emp = monte_carlo_sign_covariance(&spec, MC_SAMPLES, seed)?.get(0, 0);
    let dev = (emp - 1.0 / 3.0).abs();
    let tol = theorem_tolerance(1, MC_SAMPLES);
    r.check(
        "arcsine law d=1 rho=0.5",
        format!("deviation {} <= {}", fmt_e(dev), fmt_e(tol)),
        dev <= tol,
    );

    let spec = random_psd_spec(4, seed)?;
    let emp = monte_carlo_sign_covariance(&spec, MC_SAMPLES, seed)?;
    let dev = max_abs_diff(emp.as_slice(), spec.expected_sign_covariance().as_slice());
    let tol = theorem_tolerance(4, MC_SAMPLES);
    r.check(
        "arcsine law d=4 random covariance",
        format!("max deviation {} <= {}", fmt_e(dev), fmt_e(tol)),
        dev <= tol,
    );
    Ok(())
}

fn geometry(r: &mut Report, rng: &mut StreamRng, seed: u64) -> Result<()> {
    let q = gaussian_matrix(rng, 16, 48);
    let k = gaussian_matrix(rng, 16, 48);
    let rep = verify_geometry_identities(&q, &k, 64, seed)?;
    let dev = rep.max_deviation();
    r.check(
        "distance identities",
        format!("max deviation {} <= 1e-12", fmt_e(dev)),
        dev <= 1e-12,
    );
    Ok(())
}

fn qkv(rng: &mut StreamRng, n: usize, d: usize) -> [DenseMatrix; 3] {
    [
        gaussian_matrix(rng, n, d),
        gaussian_matrix(rng, n, d),
        gaussian_matrix(rng, n, d),
    ]
}

fn attention(r: &mut Report, rng: &mut StreamRng) -> Result<()> {
    let (n, d) = (64, 16);
    let [q, k, v] = qkv(rng, n, d);
    let cfg = AttentionConfig::new(n, d);
    let unfused = binary_attention_unfused(&q, &k, &v, &cfg)?;
    let scale = max_abs(unfused.y.as_slice());
    let mut worst = 0.0f64;
    for b in [1, 3, 16, n] {
        let fused = binary_attention_fused(&q, &k, &v, &cfg.clone().with_blocks(b, b))?;
        worst = worst.max(max_abs_diff(fused.y.as_slice(), unfused.y.as_slice()) / scale);
    }
    r.check(
        "online softmax",
        format!("fused vs unfused relative {} <= 1e-12", fmt_e(worst)),
        worst <= 1e-12,
    );
    let single = binary_attention_fused(&q, &k, &v, &cfg.clone().with_blocks(n, n))?;
    r.check(
        "single block bit identity",
        "fused equals unfused exactly",
        single.y.as_slice() == unfused.y.as_slice(),
    );

    let (n, d) = (128, 64);
    let [q, k, v] = qkv(rng, n, d);
    let cfg = AttentionConfig::new(n, d);
    let plain = binary_attention_unfused(&q, &k, &v, &cfg)?;
    let quant = binary_attention_fused(&q, &k, &v, &cfg.clone().with_quantize_pv(true))?;
    let num: f64 = plain
        .y
        .as_slice()
        .iter()
        .zip(quant.y.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let den: f64 = plain.y.as_slice().iter().map(|a| a * a).sum();
    let rel = (num / den).sqrt();
    let entry = max_abs_diff(plain.y.as_slice(), quant.y.as_slice());
    let bound = pv_quantization_bound(d, &quantize_values(&v));
    r.check(
        "quantized attention",
        format!(
            "relative L2 {} <= 1e-2, max entry {} <= {}",
            fmt_e(rel),
            fmt_e(entry),
            fmt_e(bound)
        ),
        rel <= 1e-2 && entry <= bound,
    );
    Ok(())
}

fn fidelity(r: &mut Report, rng: &mut StreamRng) -> Result<()> {
    let (n, d) = (24, 8);
    let [q, k, v] = qkv(rng, n, d);
    let p = reference_attention(&q, &k, &v, &AttentionConfig::new(n, d))?
        .probs
        .expect("reference path materializes probabilities");
    let f = attention_fidelity(&p, &p, 5)?;
    let ok = (f.cos_sim - 1.0).abs() <= 1e-12 && f.relative_l1 == 0.0 && f.rmse == 0.0;
    r.check(
        "fidelity self comparison",
        format!(
            "cos {:.12} l1 {} rmse {} precision {}",
            f.cos_sim, f.relative_l1, f.rmse, f.precision_at_k
        ),
        ok && f.precision_at_k == 1.0 && precision_at_k(&p, &p, n)? == 1.0,
    );
    Ok(())
}

fn ops(r: &mut Report, rng: &mut StreamRng) -> Result<()> {
    let (n, d) = (50, 20);
    let [q, k, v] = qkv(rng, n, d);
    let bias = BiasSpec::Relative1d(gaussian_matrix(rng, 1, 2 * n - 1).into_vec());
    let mut mismatches = 0usize;
    for (br, bc, quantize) in [(8, 16, true), (50, 7, false), (1, 1, true)] {
        let cfg = AttentionConfig::new(n, d)
            .with_blocks(br, bc)
            .with_quantize_pv(quantize)
            .with_bias(bias.clone());
        let (_, counted) = binary_attention_fused_counted(&q, &k, &v, &cfg)?;
        mismatches += usize::from(counted != count_ops(&cfg).counts);
    }
    let bops = count_ops(&AttentionConfig::new(196, 64)).bops();
    r.check(
        "ops accounting",
        format!("{mismatches} counter mismatches, N=196 d=64 bops {bops}"),
        mismatches == 0 && bops == 4_917_248,
    );
    Ok(())
}

fn gradients(r: &mut Report, rng: &mut StreamRng) -> Result<()> {
    let student = gaussian_matrix(rng, 6, 5);
    let teacher = gaussian_matrix(rng, 6, 5);
    let worst = grad_check_distillation(&student, &teacher, 1e-5)?;
    r.check(
        "distillation gradient",
        format!("relative error {} <= 1e-7", fmt_e(worst)),
        worst <= 1e-7,
    );

    let (n, d) = (8, 8);
    let [q, k, v] = qkv(rng, n, d);
    let bias = gaussian_matrix(rng, n, n).scaled(0.5)?;
    let cfg = AttentionConfig::new(n, d);
    let err = grad_check_bias(&q, &k, &v, &BiasSpec::Dense(bias.clone()), &cfg, 1e-5)?;
    r.check(
        "dense bias gradient",
        format!("relative error {} <= 1e-4", fmt_e(err)),
        err <= 1e-4,
    );

    let teacher = reference_attention(&q, &k, &v, &cfg)?.y;
    let (before, grad) = bias_gradient(&q, &k, &v, &bias, &cfg, &teacher)?;
    let stepped = bias_descent_step(&bias, &grad, 1e-3)?;
    let after = bias_loss(&q, &k, &v, &stepped, &cfg, &teacher)?;
    r.check(
        "bias descent step",
        format!("loss decreased by {}", fmt_e(before - after)),
        after < before,
    );

    let x = DenseMatrix::new(1, 4, vec![-1.5, -1.0, 0.3, 2.0])?;
    let g = DenseMatrix::new(1, 4, vec![1.0, 2.0, 3.0, 4.0])?;
    let passed = ste_backward(&g, &x, SteConfig::default())?;
    r.check(
        "straight-through estimator",
        format!("{:?}", passed.as_slice()),
        passed.as_slice() == [0.0, 2.0, 3.0, 0.0],
    );
    Ok(())
}

pub fn run(seed: u64) -> Result<Report> {
    let mut report = Report::new();
    report.line(format!("selftest seed = {seed}"));
    let mut rng = stream_rng(seed, 0x5e1f);
    gemm_exact(&mut report, &mut rng)?;
    hamming(&mut report, &mut rng)?;
    tensor_files(&mut report, &mut rng)?;
    quantizers(&mut report, &mut rng)?;
    arcsine(&mut report, seed)?;
    geometry(&mut report, &mut rng, seed)?;
    attention(&mut report, &mut rng)?;
    fidelity(&mut report, &mut rng)?;
    ops(&mut report, &mut rng)?;
    gradients(&mut report, &mut rng)?;
    Ok(report)
}
