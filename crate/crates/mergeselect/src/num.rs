//! Scalar abstraction so the same kernels run in f32 for training and f64
//! for gradient checking, plus a few ordering helpers shared across modules.

use ndarray::{ArrayBase, Data, Dimension, LinalgScalar, ScalarOperand};
use num_traits::Float;

use crate::error::{MsError, Result};

/// Element type for every tensor kernel in the crate.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Indices that would sort `scores` descending; ties keep the lower index
/// first. Total order is well defined because scores are required finite.
pub fn argsort_desc<F: Real>(scores: &[F]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Indices that would sort `scores` ascending, stable on ties.
pub fn argsort_asc_stable(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// Fails with `NonFinite` if any element is NaN or infinite.
pub fn ensure_finite<F, S, D>(name: &str, a: &ArrayBase<S, D>) -> Result<()>
where
    F: Real,
    S: Data<Elem = F>,
    D: Dimension,
{
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MsError::NonFinite(name.to_string()))
    }
}

/// Least common multiple; arguments must be nonzero.
pub fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argsort_desc_breaks_ties_low_index_first() {
        let s = [1.0f32, 3.0, 3.0, 0.5];
        assert_eq!(argsort_desc(&s), vec![1, 2, 0, 3]);
    }

    #[test]
    fn argsort_asc_is_stable() {
        let s = [0.0f64, 3.75, 1.25];
        assert_eq!(argsort_asc_stable(&s), vec![0, 2, 1]);
        let t = [2.0f64, 2.0, 1.0];
        assert_eq!(argsort_asc_stable(&t), vec![2, 0, 1]);
    }

    #[test]
    fn lcm_of_region_grids() {
        assert_eq!(lcm(16, 16), 16);
        assert_eq!(lcm(32, 16), 32);
        assert_eq!(lcm(12, 16), 48);
    }
}
