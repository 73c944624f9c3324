use ndarray::{Array1, Array4, ArrayView2};

use crate::error::{MsError, Result};
use crate::num::{ensure_finite, Real};

use super::ReprMode;

/// Compresses every region of `s` consecutive tokens to one representative
/// row: the region mean, or one refinement step
/// `m ← softmax(m Kᵀ/√d) K` from the mean (semantic mode).
pub fn partition_and_compress<F: Real>(
    x: &Array4<F>,
    s: usize,
    mode: ReprMode,
) -> Result<Array4<F>> {
    if s == 0 {
        return Err(MsError::InvalidConfig("region size must be positive".into()));
    }
    let (b, h, n, d) = x.dim();
    if n % s != 0 {
        return Err(MsError::ShapeMismatch(format!(
            "token count {n} not a multiple of region size {s}"
        )));
    }
    ensure_finite("compress input", x)?;
    let n_r = n / s;
    let mut out = Array4::zeros((b, h, n_r, d));
    for bi in 0..b {
        for hi in 0..h {
            for r in 0..n_r {
                let region = x.slice(ndarray::s![bi, hi, r * s..(r + 1) * s, ..]);
                let repr = match mode {
                    ReprMode::Mean => region_mean(&region),
                    ReprMode::Semantic => semantic_repr(&region),
                };
                out.slice_mut(ndarray::s![bi, hi, r, ..]).assign(&repr);
            }
        }
    }
    Ok(out)
}

fn region_mean<F: Real>(region: &ArrayView2<'_, F>) -> Array1<F> {
    let (s, _) = region.dim();
    let inv = F::from_f64(1.0 / s as f64);
    region.sum_axis(ndarray::Axis(0)) * inv
}

fn semantic_repr<F: Real>(region: &ArrayView2<'_, F>) -> Array1<F> {
    let (s, d) = region.dim();
    let mean = region_mean(region);
    let scale = F::from_f64(1.0 / (d as f64).sqrt());
    let mut logits: Vec<F> = (0..s)
        .map(|j| region.row(j).dot(&mean) * scale)
        .collect();
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        z += *l;
    }
    let mut out = Array1::zeros(d);
    for (j, &w) in logits.iter().enumerate() {
        out.scaled_add(w / z, &region.row(j));
    }
    out
}
