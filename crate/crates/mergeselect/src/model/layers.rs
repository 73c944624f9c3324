//! Forward and reverse primitives: RMSNorm, GELU, linear maps, embedding.
//!
//! Each forward returns what its backward needs; nothing is recomputed
//! from scratch on the way back.

use ndarray::{Array1, Array2, Axis};

use crate::error::{MsError, Result};
use crate::num::Real;

pub const RMS_EPS: f64 = 1e-6;

/// y[t] = x[t] / rms(x[t]) * g, rms = sqrt(mean(x²) + eps), per row.
pub struct RmsNormCache<F> {
    pub x: Array2<F>,
    /// Per-row 1/rms.
    pub inv_rms: Array1<F>,
}

pub fn rmsnorm<F: Real>(x: &Array2<F>, g: &Array1<F>) -> Result<(Array2<F>, RmsNormCache<F>)> {
    let (rows, dim) = x.dim();
    if g.len() != dim {
        return Err(MsError::ShapeMismatch(format!(
            "gain {} vs dim {}",
            g.len(),
            dim
        )));
    }
    let eps = F::from_f64(RMS_EPS);
    let inv_dim = F::from_f64(1.0 / dim as f64);
    let mut inv_rms = Array1::zeros(rows);
    let mut y = Array2::zeros((rows, dim));
    for t in 0..rows {
        let row = x.row(t);
        let ms = row.iter().map(|&v| v * v).sum::<F>() * inv_dim;
        let ir = (ms + eps).sqrt().recip();
        inv_rms[t] = ir;
        for c in 0..dim {
            y[[t, c]] = row[c] * ir * g[c];
        }
    }
    Ok((
        y,
        RmsNormCache {
            x: x.clone(),
            inv_rms,
        },
    ))
}

/// dx and dg from dy. dx folds the mean-square path:
/// dx = ir·(dy⊙g) − ir³/dim · x · Σ_c dy_c g_c x_c.
pub fn rmsnorm_backward<F: Real>(
    dy: &Array2<F>,
    g: &Array1<F>,
    cache: &RmsNormCache<F>,
) -> (Array2<F>, Array1<F>) {
    let (rows, dim) = cache.x.dim();
    let inv_dim = F::from_f64(1.0 / dim as f64);
    let mut dx = Array2::zeros((rows, dim));
    let mut dg = Array1::zeros(dim);
    for t in 0..rows {
        let ir = cache.inv_rms[t];
        let x = cache.x.row(t);
        let mut dot = F::zero();
        for c in 0..dim {
            dot += dy[[t, c]] * g[c] * x[c];
            dg[c] += dy[[t, c]] * x[c] * ir;
        }
        let coef = ir * ir * ir * inv_dim * dot;
        for c in 0..dim {
            dx[[t, c]] = dy[[t, c]] * g[c] * ir - x[c] * coef;
        }
    }
    (dx, dg)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-form GELU, elementwise.
pub fn gelu<F: Real>(x: &Array2<F>) -> Array2<F> {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    x.mapv(|v| {
        let u = c * (v + a * v * v * v);
        half * v * (F::one() + u.tanh())
    })
}

/// Elementwise derivative, evaluated from the pre-activation.
pub fn gelu_backward<F: Real>(dy: &Array2<F>, x: &Array2<F>) -> Array2<F> {
    let c = F::from_f64(GELU_C);
    let a3 = F::from_f64(3.0 * GELU_A);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let u = c * (v + a * v * v * v);
        let th = u.tanh();
        let sech2 = F::one() - th * th;
        let du = c * (F::one() + a3 * v * v);
        *d = *d * (half * (F::one() + th) + half * v * sech2 * du);
    });
    dx
}

/// y = x·w; dw = xᵀ·dy, dx = dy·wᵀ.
pub fn linear<F: Real>(x: &Array2<F>, w: &Array2<F>) -> Result<Array2<F>> {
    if x.ncols() != w.nrows() {
        return Err(MsError::ShapeMismatch(format!(
            "linear {}x{} by {}x{}",
            x.nrows(),
            x.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    Ok(x.dot(w))
}

pub fn linear_backward<F: Real>(
    dy: &Array2<F>,
    x: &Array2<F>,
    w: &Array2<F>,
) -> (Array2<F>, Array2<F>) {
    (dy.dot(&w.t()), x.t().dot(dy))
}

/// Row-gather from the embedding table; out of range is the caller's error
/// to surface, checked here defensively.
pub fn embed_lookup<F: Real>(table: &Array2<F>, tokens: &[usize]) -> Result<Array2<F>> {
    let (vocab, dim) = table.dim();
    let mut out = Array2::zeros((tokens.len(), dim));
    for (i, &t) in tokens.iter().enumerate() {
        if t >= vocab {
            return Err(MsError::InvalidConfig(format!(
                "token id {t} outside vocab {vocab}"
            )));
        }
        out.row_mut(i).assign(&table.row(t));
    }
    Ok(out)
}

/// Scatter-add of row gradients back onto the table.
pub fn embed_backward<F: Real>(d_table: &mut Array2<F>, dy: &Array2<F>, tokens: &[usize]) {
    for (i, &t) in tokens.iter().enumerate() {
        let mut row = d_table.row_mut(t);
        row += &dy.index_axis(Axis(0), i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsnorm_unit_gain_normalizes() {
        let x = ndarray::array![[3.0f64, 4.0]];
        let g = Array1::ones(2);
        let (y, _) = rmsnorm(&x, &g).unwrap();
        // rms = sqrt((9+16)/2 + eps)
        let r = (12.5f64 + RMS_EPS).sqrt();
        assert!((y[[0, 0]] - 3.0 / r).abs() < 1e-12);
        assert!((y[[0, 1]] - 4.0 / r).abs() < 1e-12);
    }

    #[test]
    fn gelu_fixed_points() {
        let x = ndarray::array![[0.0f64, 10.0, -10.0]];
        let y = gelu(&x);
        assert_eq!(y[[0, 0]], 0.0);
        assert!((y[[0, 1]] - 10.0).abs() < 1e-9);
        assert!(y[[0, 2]].abs() < 1e-9);
    }

    #[test]
    fn gelu_matches_finite_difference() {
        let x = ndarray::array![[0.3f64, -1.2, 0.0, 2.5]];
        let dy = Array2::ones((1, 4));
        let dx = gelu_backward(&dy, &x);
        let eps = 1e-6;
        for c in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[[0, c]] += eps;
            xm[[0, c]] -= eps;
            let fd = (gelu(&xp)[[0, c]] - gelu(&xm)[[0, c]]) / (2.0 * eps);
            assert!((dx[[0, c]] - fd).abs() < 1e-8, "col {c}");
        }
    }

    #[test]
    fn rmsnorm_matches_finite_difference() {
        let x = ndarray::array![[0.5f64, -1.0, 2.0], [1.5, 0.25, -0.75]];
        let g = ndarray::array![1.1f64, 0.9, -0.3];
        let dy = ndarray::array![[0.2f64, -0.4, 1.0], [0.7, 0.1, 0.5]];
        let (_, cache) = rmsnorm(&x, &g).unwrap();
        let (dx, dg) = rmsnorm_backward(&dy, &g, &cache);
        let eps = 1e-6;
        let loss = |x: &Array2<f64>, g: &Array1<f64>| -> f64 {
            let (y, _) = rmsnorm(x, g).unwrap();
            (y * &dy).sum()
        };
        for t in 0..2 {
            for c in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[t, c]] += eps;
                xm[[t, c]] -= eps;
                let fd = (loss(&xp, &g) - loss(&xm, &g)) / (2.0 * eps);
                assert!((dx[[t, c]] - fd).abs() < 1e-7);
            }
        }
        for c in 0..3 {
            let mut gp = g.clone();
            let mut gm = g.clone();
            gp[c] += eps;
            gm[c] -= eps;
            let fd = (loss(&x, &gp) - loss(&x, &gm)) / (2.0 * eps);
            assert!((dg[c] - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn embed_roundtrip_and_bounds() {
        let table = ndarray::array![[1.0f32, 2.0], [3.0, 4.0]];
        let x = embed_lookup(&table, &[1, 0, 1]).unwrap();
        assert_eq!(x.row(0).to_vec(), vec![3.0, 4.0]);
        assert!(embed_lookup(&table, &[2]).is_err());
        let mut grad = Array2::<f32>::zeros((2, 2));
        embed_backward(&mut grad, &Array2::ones((3, 2)), &[1, 0, 1]);
        assert_eq!(grad[[1, 0]], 2.0);
        assert_eq!(grad[[0, 0]], 1.0);
    }
}
