use ndarray::{Array2, Array4};

use crate::error::{MsError, Result};
use crate::num::{ensure_finite, Real};
use crate::positional::{rope_apply, PosEncoding};

/// Reference implementation: full causal softmax attention with rotation by
/// original position, materializing the whole n×n score matrix and masking
/// it afterwards. Quadratic on purpose; used by tests and benchmarks only.
pub fn dense_causal_oracle<F: Real>(
    q: &Array4<F>,
    k: &Array4<F>,
    v: &Array4<F>,
    ids: &Array2<i64>,
    enc: &PosEncoding,
) -> Result<Array4<F>> {
    let (b, h, n, d) = q.dim();
    if k.dim() != (b, h, n, d) || v.dim() != (b, h, n, d) {
        return Err(MsError::ShapeMismatch("q/k/v disagree".into()));
    }
    ensure_finite("oracle q", q)?;
    ensure_finite("oracle k", k)?;
    ensure_finite("oracle v", v)?;
    let inv_sqrt_d = F::from_f64(1.0 / (d as f64).sqrt());
    let mut out = Array4::<F>::zeros((b, h, n, d));
    for bi in 0..b {
        let pos: Vec<i64> = ids.row(bi).to_vec();
        for hi in 0..h {
            let mut qr = q.slice(ndarray::s![bi, hi, .., ..]).to_owned();
            let mut kr = k.slice(ndarray::s![bi, hi, .., ..]).to_owned();
            rope_apply(qr.view_mut(), &pos, enc)?;
            rope_apply(kr.view_mut(), &pos, enc)?;
            let mut logits = qr.dot(&kr.t());
            logits.mapv_inplace(|x| x * inv_sqrt_d);
            let vs = v.slice(ndarray::s![bi, hi, .., ..]);
            for t in 0..n {
                let mut max = F::neg_infinity();
                for j in 0..=t {
                    max = max.max(logits[[t, j]]);
                }
                let mut z = F::zero();
                let mut w = vec![F::zero(); t + 1];
                for j in 0..=t {
                    let e = (logits[[t, j]] - max).exp();
                    w[j] = e;
                    z += e;
                }
                let mut row = out.slice_mut(ndarray::s![bi, hi, t, ..]);
                for j in 0..=t {
                    let a = w[j] / z;
                    row.scaled_add(a, &vs.row(j));
                }
            }
        }
    }
    Ok(out)
}

/// Multiply-adds the oracle issues: the n×n score matmul plus the n×n
/// weighted sum, per head.
pub fn dense_mas(b: usize, h: usize, n: usize, d: usize) -> u64 {
    2 * (b * h * n * n * d) as u64
}
