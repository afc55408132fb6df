use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use binattn::{
    attention_fidelity, binary_attention_unfused, read_tensor, reference_attention, write_tensor,
    AttentionConfig, DenseMatrix, Error, Result, Tensor,
};
use clap::Args;

use crate::commands::default_top_k;
use crate::inputs::{fmt_e, fmt_f, gaussian_qkv, random_bias, Qkv};
use crate::report::Report;
use crate::{BiasKind, GlobalOpts};

const DEFAULT_DIR: &str = "demo_out";

#[derive(Args, Debug)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, value_enum, default_value_t = BiasKind::None)]
    pub bias: BiasKind,
    /// Top-k size for precision [default: min(100, N/4), at least 1].
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Query tensor file; replaces the generated inputs together with --k and --v.
    #[arg(long, requires_all = ["k", "v"])]
    pub q: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "v"])]
    pub k: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "k"])]
    pub v: Option<PathBuf>,
}

/// Row-max normalized 8-bit binary graymap; the largest entry of each row is white.
pub fn pgm_bytes(p: &DenseMatrix) -> Vec<u8> {
    let (h, w) = p.shape();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for i in 0..h {
        let row = p.row(i);
        let peak = row.iter().copied().fold(0.0, f64::max);
        out.extend(row.iter().map(|&x| {
            if peak > 0.0 {
                (255.0 * x / peak).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
    }
    out
}

pub fn csv_matrix(m: &DenseMatrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let fields: Vec<String> = m.row(i).iter().map(|x| x.to_string()).collect();
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

fn load_inputs(args: &DemoArgs, seed: u64) -> Result<Qkv> {
    match (&args.q, &args.k, &args.v) {
        (Some(q), Some(k), Some(v)) => Ok(Qkv {
            q: read_tensor(q)?.into_dense()?,
            k: read_tensor(k)?.into_dense()?,
            v: read_tensor(v)?.into_dense()?,
        }),
        _ => {
            if args.n == 0 || args.d == 0 {
                return Err(Error::Config("--n and --d must be positive".into()));
            }
            Ok(gaussian_qkv(args.n, args.d, seed))
        }
    }
}

fn write_map(dir: &Path, stem: &str, p: &DenseMatrix) -> Result<()> {
    fs::write(dir.join(format!("{stem}.csv")), csv_matrix(p))?;
    fs::write(dir.join(format!("{stem}.pgm")), pgm_bytes(p))?;
    write_tensor(dir.join(format!("{stem}.batf")), &Tensor::Dense(p.clone()))
}

pub fn run(args: &DemoArgs, global: &GlobalOpts) -> Result<Report> {
    let inp = load_inputs(args, global.seed)?;
    let (n, d) = inp.q.shape();
    let bias = random_bias(args.bias, n, global.seed)?;
    let cfg = AttentionConfig::new(n, d).with_bias(bias);
    let reference = reference_attention(&inp.q, &inp.k, &inp.v, &cfg)?;
    let binary = binary_attention_unfused(&inp.q, &inp.k, &inp.v, &cfg)?;
    let (Some(p_ref), Some(p_bin)) = (reference.probs, binary.probs) else {
        return Err(Error::Numerical(
            "attention path returned no probabilities".into(),
        ));
    };
    let fid = attention_fidelity(
        &p_ref,
        &p_bin,
        args.top_k.unwrap_or_else(|| default_top_k(n)),
    )?;

    let dir = global
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DIR));
    fs::create_dir_all(&dir)?;
    write_map(&dir, "p_ref", &p_ref)?;
    write_map(&dir, "p_bin", &p_bin)?;

    let mut report = Report::new();
    report.line(format!(
        "N = {n}, d = {d}, bias = {:?}, seed = {}",
        args.bias, global.seed
    ));
    report.table(
        &["metric", "value"],
        vec![
            vec!["cos_sim".into(), fmt_f(fid.cos_sim)],
            vec!["relative_l1".into(), fmt_f(fid.relative_l1)],
            vec!["rmse".into(), fmt_e(fid.rmse)],
            vec![format!("precision@{}", fid.k), fmt_f(fid.precision_at_k)],
        ],
    );
    report.check(
        "maps written",
        format!("p_ref and p_bin in {}", dir.display()),
        fid.cos_sim > 0.0,
    );
    fs::write(dir.join("report.csv"), report.csv())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_is_one_white_pixel() {
        let p = DenseMatrix::new(1, 1, vec![1.0]).unwrap();
        assert_eq!(pgm_bytes(&p), b"P5\n1 1\n255\n\xff".to_vec());
    }

    #[test]
    fn pgm_normalizes_each_row() {
        let p = DenseMatrix::new(2, 2, vec![0.5, 0.25, 0.1, 0.9]).unwrap();
        let bytes = pgm_bytes(&p);
        assert_eq!(&bytes[bytes.len() - 4..], &[255, 128, 28, 255]);
    }

    #[test]
    fn csv_round_trips_values() {
        let m = DenseMatrix::new(2, 2, vec![0.1, 1.0 / 3.0, 2.0, -0.0]).unwrap();
        let text = csv_matrix(&m);
        let parsed: Vec<f64> = text
            .lines()
            .flat_map(|l| l.split(',').map(|x| x.parse::<f64>().unwrap()))
            .collect();
        assert_eq!(parsed, m.as_slice());
    }
}
