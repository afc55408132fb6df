use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use binattn::fidelity::{count_reference_ops, OpsReport};
use binattn::theory::{monte_carlo_sign_covariance, random_psd_spec, JointGaussianSpec};
use binattn::{
    attention_fidelity, binary_attention_fused, binary_attention_unfused, count_ops,
    reference_attention, AttentionConfig, Error, Result,
};
use binattn_bench::{run_bench, speedups, write_csv, BenchOptions, Kernel, Shape, Suite};
use clap::Args;

use crate::inputs::{fmt_e, fmt_f, gaussian_qkv, random_bias};
use crate::report::Report;
use crate::BiasKind;

#[derive(Args, Debug)]
pub struct TheoremArgs {
    /// Channels per vector.
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    /// Correlation between matching query and key channels; omit to draw a
    /// random covariance.
    #[arg(long, allow_negative_numbers = true)]
    pub rho: Option<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
}

/// Three standard errors for a single ±1 average, four for a matrix maximum.
pub fn theorem_tolerance(dim: usize, samples: usize) -> f64 {
    let sigmas = if dim == 1 { 3.0 } else { 4.0 };
    sigmas / (samples as f64).sqrt()
}

pub fn verify_theorem1(args: &TheoremArgs, seed: u64) -> Result<Report> {
    if args.dim == 0 {
        return Err(Error::Config("--dim must be positive".into()));
    }
    if args.samples == 0 {
        return Err(Error::Config("--samples must be positive".into()));
    }
    let spec = match args.rho {
        Some(rho) => JointGaussianSpec::paired(args.dim, rho)?,
        None => random_psd_spec(args.dim, seed)?,
    };
    let analytic = spec.expected_sign_covariance();
    let empirical = monte_carlo_sign_covariance(&spec, args.samples, seed)?;
    let d = args.dim;

    let mut report = Report::new();
    report.line(format!(
        "E[sign(q) sign(k)^T], d = {d}, M = {}, seed = {seed}",
        args.samples
    ));
    let mut rows = Vec::with_capacity(d * d);
    let mut max_dev = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let (e, a) = (empirical.get(i, j), analytic.get(i, j));
            max_dev = max_dev.max((e - a).abs());
            rows.push(vec![
                i.to_string(),
                j.to_string(),
                fmt_f(e),
                fmt_f(a),
                fmt_e((e - a).abs()),
            ]);
        }
    }
    report.table(&["i", "j", "empirical", "analytic", "deviation"], rows);
    let tol = theorem_tolerance(d, args.samples);
    report.check(
        "arcsine law",
        format!("max deviation {} <= {}", fmt_e(max_dev), fmt_e(tol)),
        max_dev <= tol,
    );
    Ok(report)
}

#[derive(Args, Debug)]
pub struct FidelityArgs {
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, value_enum, default_value_t = BiasKind::None)]
    pub bias: BiasKind,
    /// Top-k size for precision [default: min(100, N/4), at least 1].
    #[arg(long)]
    pub k: Option<usize>,
}

/// Top-k covering the whole row would make precision trivially 1.
pub fn default_top_k(n: usize) -> usize {
    (n / 4).clamp(1, 100)
}

fn ops_row(name: &str, r: &OpsReport) -> Vec<String> {
    vec![
        name.to_string(),
        r.bops().to_string(),
        r.int8_ops().to_string(),
        r.flops().to_string(),
        format!("{:.1}", r.total_ops()),
    ]
}

pub fn fidelity(args: &FidelityArgs, seed: u64) -> Result<Report> {
    let (n, d) = (args.n, args.d);
    if n == 0 || d == 0 {
        return Err(Error::Config("--n and --d must be positive".into()));
    }
    let inp = gaussian_qkv(n, d, seed);
    let bias = random_bias(args.bias, n, seed)?;
    let cfg = AttentionConfig::new(n, d).with_bias(bias);
    let qcfg = cfg.clone().with_quantize_pv(true);

    let reference = reference_attention(&inp.q, &inp.k, &inp.v, &cfg)?;
    let binary = binary_attention_unfused(&inp.q, &inp.k, &inp.v, &cfg)?;
    let fused = binary_attention_fused(&inp.q, &inp.k, &inp.v, &qcfg)?;
    let (Some(p_ref), Some(p_bin)) = (reference.probs.as_ref(), binary.probs.as_ref()) else {
        return Err(Error::Numerical(
            "attention path returned no probabilities".into(),
        ));
    };
    let fid = attention_fidelity(p_ref, p_bin, args.k.unwrap_or_else(|| default_top_k(n)))?;
    let out_err = binattn::fidelity::relative_l1(&reference.y, &fused.y);

    let mut report = Report::new();
    report.line(format!(
        "N = {n}, d = {d}, bias = {:?}, seed = {seed}",
        args.bias
    ));
    report.table(
        &["metric", "value"],
        vec![
            vec!["cos_sim".into(), fmt_f(fid.cos_sim)],
            vec!["relative_l1".into(), fmt_f(fid.relative_l1)],
            vec!["rmse".into(), fmt_e(fid.rmse)],
            vec![format!("precision@{}", fid.k), fmt_f(fid.precision_at_k)],
            vec!["output_relative_l1".into(), fmt_f(out_err)],
        ],
    );
    report.table(
        &["path", "bops", "int8_ops", "flops", "total_ops"],
        vec![
            ops_row("reference", &count_reference_ops(&cfg)),
            ops_row("binary", &count_ops(&qcfg)),
        ],
    );
    let finite = [
        fid.cos_sim,
        fid.relative_l1,
        fid.rmse,
        fid.precision_at_k,
        out_err,
    ]
    .iter()
    .all(|x| x.is_finite());
    report.check(
        "fidelity sanity",
        format!("cos_sim {} > 0, all metrics finite", fmt_f(fid.cos_sim)),
        finite && fid.cos_sim > 0.0,
    );
    Ok(report)
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value = "gemm")]
    pub suite: String,
    /// Comma-separated kernel names; overrides the suite.
    #[arg(long, value_delimiter = ',')]
    pub kernels: Vec<String>,
    /// Comma-separated N (= M) values.
    #[arg(long, value_delimiter = ',', default_value = "512,1024,2048")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    pub d: usize,
    #[arg(long, default_value_t = 9)]
    pub reps: usize,
    #[arg(long, default_value_t = 2)]
    pub warmups: usize,
    /// Let kernels use the global thread pool.
    #[arg(long)]
    pub parallel: bool,
    /// Write raw results as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn bench(args: &BenchArgs, seed: u64) -> Result<Report> {
    let kernels: Vec<Kernel> = if args.kernels.is_empty() {
        args.suite.parse::<Suite>()?.kernels().to_vec()
    } else {
        args.kernels
            .iter()
            .map(|k| k.parse())
            .collect::<Result<_>>()?
    };
    if args.sizes.is_empty() || args.sizes.contains(&0) || args.d == 0 {
        return Err(Error::Config("sizes and --d must be positive".into()));
    }
    let shapes: Vec<Shape> = args
        .sizes
        .iter()
        .map(|&n| Shape::square(n, args.d))
        .collect();
    let opts = BenchOptions {
        reps: args.reps,
        warmups: args.warmups,
        seed,
        parallel: args.parallel,
    };
    let results = run_bench(&kernels, &shapes, &opts)?;
    if let Some(path) = &args.csv {
        write_csv(&results, BufWriter::new(File::create(path)?))?;
    }

    let mut report = Report::new();
    report.line(format!(
        "median of {} reps after {} warmups, {}",
        opts.reps,
        opts.warmups,
        if opts.parallel {
            "parallel"
        } else {
            "single-threaded"
        }
    ));
    report.table(
        &["kernel", "N", "M", "d", "median_ns", "ops", "ops_per_sec"],
        results
            .iter()
            .map(|r| {
                vec![
                    r.kernel.to_string(),
                    r.shape.n.to_string(),
                    r.shape.m.to_string(),
                    r.shape.d.to_string(),
                    r.median_ns.to_string(),
                    r.ops.to_string(),
                    format!("{:.3e}", r.ops_per_sec),
                ]
            })
            .collect(),
    );
    let pairs = [
        (Kernel::BinaryGemm, Kernel::NaiveF32Gemm),
        (Kernel::Int8Gemm, Kernel::NaiveF32Gemm),
        (Kernel::BinaryAttentionFused, Kernel::ReferenceAttention),
    ];
    let mut ratios = Vec::new();
    for (kernel, baseline) in pairs {
        for (shape, ratio) in speedups(&results, kernel, baseline) {
            ratios.push(vec![
                format!("{kernel}/{baseline}"),
                shape.n.to_string(),
                shape.d.to_string(),
                format!("{ratio:.2}"),
            ]);
        }
    }
    if !ratios.is_empty() {
        report.table(&["speedup", "N", "d", "ratio"], ratios);
    }
    Ok(report)
}
