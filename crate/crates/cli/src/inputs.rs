//! Seeded inputs shared by the commands.

use binattn::rng::{gaussian_matrix, stream_rng};
use binattn::{BiasSpec, DenseMatrix, Error, Result};

use crate::BiasKind;

const BIAS_STREAM: u64 = 3;
const BIAS_SCALE: f64 = 0.5;

pub struct Qkv {
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
}

pub fn gaussian_qkv(n: usize, d: usize, seed: u64) -> Qkv {
    Qkv {
        q: gaussian_matrix(&mut stream_rng(seed, 0), n, d),
        k: gaussian_matrix(&mut stream_rng(seed, 1), n, d),
        v: gaussian_matrix(&mut stream_rng(seed, 2), n, d),
    }
}

/// Random bias of the requested kind with entries of scale 0.5.
pub fn random_bias(kind: BiasKind, n: usize, seed: u64) -> Result<BiasSpec> {
    let mut rng = stream_rng(seed, BIAS_STREAM);
    let mut draw = |len: usize| -> Vec<f64> {
        gaussian_matrix(&mut rng, 1, len)
            .into_vec()
            .into_iter()
            .map(|x| BIAS_SCALE * x)
            .collect()
    };
    Ok(match kind {
        BiasKind::None => BiasSpec::None,
        BiasKind::Dense => BiasSpec::Dense(DenseMatrix::new(n, n, draw(n * n))?),
        BiasKind::Rel1d => BiasSpec::Relative1d(draw(2 * n - 1)),
        BiasKind::Rel2d => {
            let g = (n as f64).sqrt().round() as usize;
            if g * g != n {
                return Err(Error::Config(format!(
                    "rel2d bias needs N to be a perfect square, got {n}"
                )));
            }
            BiasSpec::Relative2d {
                row_offsets: draw(2 * g - 1),
                col_offsets: draw(2 * g - 1),
            }
        }
    })
}

pub fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

pub fn fmt_e(x: f64) -> String {
    format!("{x:.3e}")
}
