//! Attention-map fidelity metrics and operation accounting.
//!
//! Binary operations are folded into the headline total at weight 1/64 and
//! int8 operations at weight 1/2: `OPs = BOPs/64 + INT8/2 + FLOPs`. Every
//! multiply-accumulate counts as two operations in its own category.

use std::ops::Add;

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelityReport {
    pub cos_sim: f64,
    pub relative_l1: f64,
    pub rmse: f64,
    pub precision_at_k: f64,
    pub k: usize,
}

/// Indices of the `k` largest entries, ties going to the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k.min(row.len()));
    idx
}

/// Mean over rows of `|top_k(a_i) ∩ top_k(b_i)| / k'` with `k' = min(k, cols)`.
pub fn precision_at_k(a: &DenseMatrix, b: &DenseMatrix, k: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "precision_at_k: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::shape("precision_at_k needs a nonempty matrix"));
    }
    let kk = k.min(cols);
    let mut total = 0.0;
    let mut hit = vec![false; cols];
    for i in 0..rows {
        hit.fill(false);
        for j in top_k_indices(a.row(i), kk) {
            hit[j] = true;
        }
        let common = top_k_indices(b.row(i), kk)
            .into_iter()
            .filter(|&j| hit[j])
            .count();
        total += common as f64 / kk as f64;
    }
    Ok(total / rows as f64)
}

fn check_stochastic(p: &DenseMatrix, what: &str) -> Result<()> {
    for i in 0..p.rows() {
        let row = p.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&x| x < -STOCHASTIC_TOL) {
            return Err(Error::Validation(format!(
                "{what} row {i} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Compares two attention matrices; `relative_l1` is normalized by `p_ref`.
pub fn attention_fidelity(
    p_ref: &DenseMatrix,
    p_bin: &DenseMatrix,
    k: usize,
) -> Result<FidelityReport> {
    if p_ref.shape() != p_bin.shape() || p_ref.rows() != p_ref.cols() {
        return Err(Error::shape(format!(
            "attention_fidelity needs equal square shapes, got {:?} and {:?}",
            p_ref.shape(),
            p_bin.shape()
        )));
    }
    check_stochastic(p_ref, "reference")?;
    check_stochastic(p_bin, "binary")?;

    Ok(FidelityReport {
        cos_sim: cosine_similarity(p_ref, p_bin),
        relative_l1: relative_l1(p_ref, p_bin),
        rmse: rmse(p_ref, p_bin),
        precision_at_k: precision_at_k(p_ref, p_bin, k)?,
        k,
    })
}

fn pairs<'a>(a: &'a DenseMatrix, b: &'a DenseMatrix) -> impl Iterator<Item = (f64, f64)> + 'a {
    debug_assert_eq!(a.shape(), b.shape());
    a.as_slice()
        .iter()
        .copied()
        .zip(b.as_slice().iter().copied())
}

/// Cosine between the two matrices flattened to vectors.
pub fn cosine_similarity(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in pairs(a, b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// `‖a − b‖₁ / ‖a‖₁`; not symmetric in its arguments.
pub fn relative_l1(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let (mut diff, mut norm) = (0.0, 0.0);
    for (x, y) in pairs(a, b) {
        diff += (x - y).abs();
        norm += x.abs();
    }
    diff / norm
}

pub fn rmse(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let sq: f64 = pairs(a, b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq / a.as_slice().len() as f64).sqrt()
}

/// Itemized operation counts for one attention call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Binary multiply-accumulates in `QKᵀ`, two per MAC.
    pub bops: u64,
    /// Full-precision `QKᵀ` work (reference path only).
    pub qk_flops: u64,
    pub int8_ops: u64,
    pub pv_flops: u64,
    pub score_flops: u64,
    pub bias_flops: u64,
    pub max_flops: u64,
    pub exp_flops: u64,
    pub sum_flops: u64,
    pub rescale_flops: u64,
    pub normalize_flops: u64,
    /// Scale statistics and rounding; outside the headline total by default.
    pub quant_flops: u64,
}

impl Add for OpCounts {
    type Output = OpCounts;

    fn add(self, o: OpCounts) -> OpCounts {
        OpCounts {
            bops: self.bops + o.bops,
            qk_flops: self.qk_flops + o.qk_flops,
            int8_ops: self.int8_ops + o.int8_ops,
            pv_flops: self.pv_flops + o.pv_flops,
            score_flops: self.score_flops + o.score_flops,
            bias_flops: self.bias_flops + o.bias_flops,
            max_flops: self.max_flops + o.max_flops,
            exp_flops: self.exp_flops + o.exp_flops,
            sum_flops: self.sum_flops + o.sum_flops,
            rescale_flops: self.rescale_flops + o.rescale_flops,
            normalize_flops: self.normalize_flops + o.normalize_flops,
            quant_flops: self.quant_flops + o.quant_flops,
        }
    }
}

impl OpCounts {
    /// Floating-point work excluding quantization preprocessing.
    pub fn core_flops(&self) -> u64 {
        self.qk_flops
            + self.pv_flops
            + self.score_flops
            + self.bias_flops
            + self.max_flops
            + self.exp_flops
            + self.sum_flops
            + self.rescale_flops
            + self.normalize_flops
    }

    /// The two matrix products, each in its native unit.
    pub fn matmul_ops(&self) -> u64 {
        self.bops + self.qk_flops + self.int8_ops + self.pv_flops
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpsReport {
    pub counts: OpCounts,
    pub include_quant: bool,
}

impl OpsReport {
    pub fn bops(&self) -> u64 {
        self.counts.bops
    }

    pub fn int8_ops(&self) -> u64 {
        self.counts.int8_ops
    }

    pub fn flops(&self) -> u64 {
        self.counts.core_flops()
            + if self.include_quant {
                self.counts.quant_flops
            } else {
                0
            }
    }

    pub fn total_ops(&self) -> f64 {
        self.counts.bops as f64 / 64.0 + self.counts.int8_ops as f64 / 2.0 + self.flops() as f64
    }

    pub fn with_quant(mut self, include: bool) -> Self {
        self.include_quant = include;
        self
    }
}

/// Closed-form operation counts of the fused binary kernel under `cfg`.
pub fn count_ops(cfg: &AttentionConfig) -> OpsReport {
    let (n, d) = (cfg.n as u64, cfg.d as u64);
    let tv = cfg.key_blocks() as u64;
    let pairs = n * n;
    let products = 2 * pairs * d;
    let q = cfg.quantize_pv;
    let counts = OpCounts {
        bops: products,
        qk_flops: 0,
        int8_ops: if q { products } else { 0 },
        pv_flops: if q { 0 } else { products },
        score_flops: pairs,
        bias_flops: if cfg.bias.is_none() { 0 } else { pairs },
        max_flops: pairs,
        exp_flops: pairs + n * tv,
        sum_flops: pairs + 2 * n * tv,
        rescale_flops: 2 * n * d * tv,
        normalize_flops: n * d * if q { 2 } else { 1 },
        quant_flops: 4 * n * d + if q { 2 * n * d + pairs } else { 0 },
    };
    OpsReport {
        counts,
        include_quant: false,
    }
}

/// Operation counts of the full-precision reference path.
pub fn count_reference_ops(cfg: &AttentionConfig) -> OpsReport {
    let (n, d) = (cfg.n as u64, cfg.d as u64);
    let pairs = n * n;
    let counts = OpCounts {
        qk_flops: 2 * pairs * d,
        pv_flops: 2 * pairs * d,
        score_flops: pairs,
        bias_flops: if cfg.bias.is_none() { 0 } else { pairs },
        max_flops: pairs,
        exp_flops: pairs,
        sum_flops: pairs,
        normalize_flops: n * d + pairs,
        ..OpCounts::default()
    };
    OpsReport {
        counts,
        include_quant: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{binary_attention_fused_counted, BiasSpec};
    use crate::rng::{gaussian_matrix, stream_rng};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_stochastic(rng: &mut crate::rng::StreamRng, n: usize) -> DenseMatrix {
        let raw = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.0));
        DenseMatrix::from_fn(n, n, |i, j| raw.get(i, j) / raw.row(i).iter().sum::<f64>())
    }

    #[test]
    fn self_comparison_is_perfect() {
        let p = random_stochastic(&mut stream_rng(1, 0), 6);
        let r = attention_fidelity(&p, &p, 3).unwrap();
        assert!((r.cos_sim - 1.0).abs() < 1e-15);
        assert_eq!((r.relative_l1, r.rmse, r.precision_at_k), (0.0, 0.0, 1.0));
    }

    #[test]
    fn uniform_against_one_hot_uses_lower_index_ties() {
        let uniform = DenseMatrix::from_fn(4, 4, |_, _| 0.25);
        let hot0 = DenseMatrix::from_fn(4, 4, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let hot2 = DenseMatrix::from_fn(4, 4, |_, j| if j == 2 { 1.0 } else { 0.0 });
        assert_eq!(
            attention_fidelity(&hot0, &uniform, 1)
                .unwrap()
                .precision_at_k,
            1.0
        );
        assert_eq!(
            attention_fidelity(&hot2, &uniform, 1)
                .unwrap()
                .precision_at_k,
            0.0
        );
    }

    #[test]
    fn metrics_match_brute_force() {
        let mut rng = stream_rng(2, 0);
        let a = random_stochastic(&mut rng, 8);
        let b = random_stochastic(&mut rng, 8);
        let r = attention_fidelity(&a, &b, 3).unwrap();

        let mut hits = 0usize;
        for i in 0..8 {
            let top = |m: &DenseMatrix| {
                let mut set = Vec::new();
                for _ in 0..3 {
                    let mut best = None;
                    for j in 0..8 {
                        if set.contains(&j) {
                            continue;
                        }
                        match best {
                            Some(bj) if m.get(i, bj) >= m.get(i, j) => {}
                            _ => best = Some(j),
                        }
                    }
                    set.push(best.unwrap());
                }
                set
            };
            let (ta, tb) = (top(&a), top(&b));
            hits += ta.iter().filter(|j| tb.contains(j)).count();
        }
        assert_eq!(r.precision_at_k, hits as f64 / 24.0);

        let (x, y) = (a.as_slice(), b.as_slice());
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let cos = dot
            / (x.iter().map(|p| p * p).sum::<f64>().sqrt()
                * y.iter().map(|q| q * q).sum::<f64>().sqrt());
        let l1 = x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.iter().sum::<f64>();
        let rmse = (x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / 64.0).sqrt();
        assert!((r.cos_sim - cos).abs() < 1e-12);
        assert!((r.relative_l1 - l1).abs() < 1e-12);
        assert!((r.rmse - rmse).abs() < 1e-12);
    }

    #[test]
    fn shape_and_row_checks() {
        let a = DenseMatrix::from_fn(3, 3, |_, _| 1.0 / 3.0);
        let b = DenseMatrix::from_fn(4, 4, |_, _| 0.25);
        assert!(matches!(
            attention_fidelity(&a, &b, 1),
            Err(Error::Shape(_))
        ));
        let bad = DenseMatrix::from_fn(3, 3, |_, _| 0.5);
        assert!(matches!(
            attention_fidelity(&a, &bad, 1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn relative_l1_is_asymmetric_rmse_symmetric() {
        let a = DenseMatrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        let b = DenseMatrix::new(1, 2, vec![2.0, 0.0]).unwrap();
        assert_eq!(relative_l1(&a, &b), 1.0);
        assert_eq!(relative_l1(&b, &a), 1.0);
        let c = DenseMatrix::new(1, 2, vec![3.0, 1.0]).unwrap();
        assert_eq!(relative_l1(&a, &c), 1.0);
        assert_eq!(relative_l1(&c, &a), 0.5);
        assert_eq!(rmse(&a, &c), rmse(&c, &a));

        let mut rng = stream_rng(3, 0);
        let p = random_stochastic(&mut rng, 5);
        let q = random_stochastic(&mut rng, 5);
        let pq = attention_fidelity(&p, &q, 2).unwrap();
        let qp = attention_fidelity(&q, &p, 2).unwrap();
        assert_eq!(pq.rmse, qp.rmse);
    }

    #[test]
    fn unit_case_counts() {
        let r = count_ops(&AttentionConfig::new(1, 1).with_quantize_pv(true));
        assert_eq!(r.bops(), 2);
        assert_eq!(r.int8_ops(), 2);
        assert_eq!(r.counts.pv_flops, 0);
        // score, max, exp ×2, sum ×3, rescale ×2, normalize ×2
        assert_eq!(r.flops(), 1 + 1 + 2 + 3 + 2 + 2);
    }

    #[test]
    fn deit_scale_counts() {
        let cfg = AttentionConfig::new(196, 64).with_quantize_pv(true);
        let r = count_ops(&cfg);
        assert_eq!(r.bops(), 4_917_248);
        assert_eq!(r.bops() / 64, 76_832);
        assert_eq!(r.counts.int8_ops, 4_917_248);
    }

    #[test]
    fn pv_quantization_swaps_categories() {
        let on = count_ops(&AttentionConfig::new(30, 8).with_quantize_pv(true)).counts;
        let off = count_ops(&AttentionConfig::new(30, 8)).counts;
        assert_eq!(on.bops, off.bops);
        assert_eq!(on.int8_ops, off.pv_flops);
        assert_eq!(on.pv_flops, off.int8_ops);
    }

    #[test]
    fn quant_flops_only_with_flag() {
        let r = count_ops(&AttentionConfig::new(10, 4));
        assert_eq!(r.with_quant(true).flops(), r.flops() + r.counts.quant_flops);
        assert!(r.with_quant(true).total_ops() > r.total_ops());
    }

    proptest! {
        #[test]
        fn instrumented_counts_match_closed_form(
            n in 1usize..40,
            d in 1usize..20,
            br_seed in any::<usize>(),
            bc_seed in any::<usize>(),
            quantize in any::<bool>(),
            bias in any::<bool>(),
        ) {
            let (br, bc) = (1 + br_seed % n, 1 + bc_seed % n);
            let mut rng = stream_rng(n as u64, d as u64);
            let q = gaussian_matrix(&mut rng, n, d);
            let k = gaussian_matrix(&mut rng, n, d);
            let v = gaussian_matrix(&mut rng, n, d);
            let mut cfg = AttentionConfig::new(n, d).with_blocks(br, bc).with_quantize_pv(quantize);
            if bias {
                cfg = cfg.with_bias(BiasSpec::Relative1d(vec![0.1; 2 * n - 1]));
            }
            let (_, tally) = binary_attention_fused_counted(&q, &k, &v, &cfg).unwrap();
            prop_assert_eq!(tally, count_ops(&cfg).counts);
        }

        #[test]
        fn precision_is_rank_based(seed in any::<u64>(), scale in 0.1f64..10.0, offset in -5.0f64..5.0) {
            let mut rng = stream_rng(seed, 0);
            let a = random_stochastic(&mut rng, 7);
            let b = random_stochastic(&mut rng, 7);
            let base = precision_at_k(&a, &b, 3).unwrap();
            let exp_a = DenseMatrix::from_fn(7, 7, |i, j| a.get(i, j).exp());
            let exp_b = DenseMatrix::from_fn(7, 7, |i, j| b.get(i, j).exp());
            prop_assert_eq!(precision_at_k(&exp_a, &exp_b, 3).unwrap(), base);
            let aff_a = DenseMatrix::from_fn(7, 7, |i, j| scale * a.get(i, j) + offset);
            let aff_b = DenseMatrix::from_fn(7, 7, |i, j| scale * b.get(i, j) + offset);
            prop_assert_eq!(precision_at_k(&aff_a, &aff_b, 3).unwrap(), base);
        }

        #[test]
        fn self_fidelity_on_random_matrices(seed in any::<u64>(), n in 1usize..12, k in 1usize..15) {
            let p = random_stochastic(&mut stream_rng(seed, 0), n);
            let r = attention_fidelity(&p, &p, k).unwrap();
            prop_assert!((r.cos_sim - 1.0).abs() < 1e-12);
            prop_assert_eq!(r.relative_l1, 0.0);
            prop_assert_eq!(r.rmse, 0.0);
            prop_assert_eq!(r.precision_at_k, 1.0);
        }
    }
}
