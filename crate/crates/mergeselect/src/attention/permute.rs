use ndarray::{Array3, Array4};

use crate::error::{MsError, Result};
use crate::num::argsort_asc_stable;

use super::{MsConfig, PermRecord};

/// Scores every Q-region row as a base-b positional sum of its leading
/// selection digits,
///
/// ```text
/// s = Σ_{i=0}^{w-1} b^{w-i} · row[i] / max,   max = n_sk
/// ```
///
/// and sorts regions by score, ascending and stable, so rows with similar
/// selections become group neighbors. Sentinel entries contribute 0. Fully
/// padded Q regions are kept out of the sort and appended at the end in
/// index order.
pub fn perm_score(
    raw: &Array4<i64>,
    cfg: &MsConfig,
    n_sk: usize,
    n: usize,
) -> Result<PermRecord> {
    let (b, h, n_sq, topk) = raw.dim();
    if cfg.perm_width > topk {
        return Err(MsError::InvalidConfig(format!(
            "perm_width {} exceeds row width {}",
            cfg.perm_width, topk
        )));
    }
    if n_sk == 0 {
        return Err(MsError::InvalidConfig("no KV regions to normalize by".into()));
    }
    let n_valid = n.div_ceil(cfg.s_q).min(n_sq);
    let mut scores = Array3::<f64>::zeros((b, h, n_sq));
    let mut forward = Array3::<usize>::zeros((b, h, n_sq));
    let mut inverse = Array3::<usize>::zeros((b, h, n_sq));
    let base = cfg.perm_base as f64;
    let max = n_sk as f64;
    for bi in 0..b {
        for hi in 0..h {
            for r in 0..n_sq {
                let mut s = 0.0;
                for i in 0..cfg.perm_width {
                    let idx = raw[[bi, hi, r, i]];
                    if idx >= 0 {
                        s += base.powi((cfg.perm_width - i) as i32) * idx as f64 / max;
                    }
                }
                scores[[bi, hi, r]] = s;
            }
            let valid: Vec<f64> = (0..n_valid).map(|r| scores[[bi, hi, r]]).collect();
            let mut order = argsort_asc_stable(&valid);
            order.extend(n_valid..n_sq);
            for (pos, &r) in order.iter().enumerate() {
                forward[[bi, hi, pos]] = r;
                inverse[[bi, hi, r]] = pos;
            }
        }
    }
    Ok(PermRecord {
        scores,
        forward,
        inverse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn cfg(width: usize) -> MsConfig {
        MsConfig {
            s_q: 1,
            s_k: 1,
            topk: width,
            merges: 1,
            topn: width,
            force_local: false,
            permute: true,
            perm_base: 5,
            perm_width: width,
            ..MsConfig::default()
        }
    }

    #[test]
    fn hand_scored_rows() {
        let raw = Array4::from_shape_vec((1, 1, 3, 1), vec![0i64, 3, 1]).unwrap();
        let p = perm_score(&raw, &cfg(1), 4, 3).unwrap();
        assert_eq!(p.scores[[0, 0, 0]], 0.0);
        assert_eq!(p.scores[[0, 0, 1]], 3.75);
        assert_eq!(p.scores[[0, 0, 2]], 1.25);
        let fwd: Vec<usize> = (0..3).map(|i| p.forward[[0, 0, i]]).collect();
        assert_eq!(fwd, vec![0, 2, 1]);
    }

    #[test]
    fn identical_rows_keep_identity_order() {
        let raw = Array4::from_elem((1, 1, 4, 2), 3i64);
        let p = perm_score(&raw, &cfg(2), 8, 4).unwrap();
        let fwd: Vec<usize> = (0..4).map(|i| p.forward[[0, 0, i]]).collect();
        assert_eq!(fwd, vec![0, 1, 2, 3]);
    }

    #[test]
    fn inverse_undoes_forward() {
        let raw =
            Array4::from_shape_vec((1, 1, 4, 1), vec![3i64, 0, 2, 1]).unwrap();
        let p = perm_score(&raw, &cfg(1), 4, 4).unwrap();
        for r in 0..4 {
            assert_eq!(p.forward[[0, 0, p.inverse[[0, 0, r]]]], r);
        }
    }

    #[test]
    fn padded_regions_sort_last() {
        // Region 3 is fully padded; even with the smallest score it stays
        // at the tail of the order.
        let raw =
            Array4::from_shape_vec((1, 1, 4, 1), vec![3i64, 2, 1, -1]).unwrap();
        let p = perm_score(&raw, &cfg(1), 4, 3).unwrap();
        let fwd: Vec<usize> = (0..4).map(|i| p.forward[[0, 0, i]]).collect();
        assert_eq!(fwd, vec![2, 1, 0, 3]);
    }

    #[test]
    fn sentinel_contributes_zero() {
        let raw =
            Array4::from_shape_vec((1, 1, 2, 2), vec![-1, -1, 1, -1]).unwrap();
        let p = perm_score(&raw, &cfg(2), 4, 2).unwrap();
        assert_eq!(p.scores[[0, 0, 0]], 0.0);
        assert_eq!(p.scores[[0, 0, 1]], 25.0 * 0.25);
    }
}
