use ndarray::Array4;

use crate::error::{MsError, Result};
use crate::num::{argsort_desc, Real};

use super::{AttnStats, MsConfig};

/// Scores Q-region representatives against KV-region representatives and
/// keeps the top-k admissible regions per row, descending score, ties to the
/// lower region index. A KV region is admissible when it lies entirely
/// before the gate token of the Q region (its own group's start without
/// permutation, its own start with). With `force_local` the row's last slots
/// hold the region's own overlapping KV regions, unscored. Short rows pad
/// with −1.
///
/// Relevance is computed as one dense representative matmul and then masked,
/// so `stats.selection_mas` grows by exactly n_sq·n_sk·d per head.
pub fn select_topk<F: Real>(
    q_repr: &Array4<F>,
    k_repr: &Array4<F>,
    cfg: &MsConfig,
    n: usize,
    stats: &mut AttnStats,
) -> Result<Array4<i64>> {
    let (b, h, n_sq, d) = q_repr.dim();
    let (bk, hk, n_sk, dk) = k_repr.dim();
    if (b, h, d) != (bk, hk, dk) {
        return Err(MsError::ShapeMismatch(format!(
            "representatives disagree: q {:?} vs k {:?}",
            q_repr.dim(),
            k_repr.dim()
        )));
    }
    let mut raw = Array4::from_elem((b, h, n_sq, cfg.topk), -1i64);
    for bi in 0..b {
        for hi in 0..h {
            let qs = q_repr.slice(ndarray::s![bi, hi, .., ..]);
            let ks = k_repr.slice(ndarray::s![bi, hi, .., ..]);
            let scores = qs.dot(&ks.t());
            stats.selection_mas += (n_sq * n_sk * d) as u64;
            for r in 0..n_sq {
                if r * cfg.s_q >= n {
                    continue;
                }
                let locals: Vec<usize> = if cfg.force_local {
                    cfg.locals_of(r).collect()
                } else {
                    Vec::new()
                };
                if locals.len() > cfg.topk {
                    return Err(MsError::InvalidConfig(format!(
                        "region {} has {} local KV regions but topk is {}",
                        r,
                        locals.len(),
                        cfg.topk
                    )));
                }
                let scored_slots = cfg.topk - locals.len();
                let gate = cfg.gate_token(r);
                let admissible: Vec<usize> = (0..n_sk)
                    .filter(|&j| j * cfg.s_k + cfg.s_k <= gate)
                    .collect();
                let cand_scores: Vec<F> =
                    admissible.iter().map(|&j| scores[[r, j]]).collect();
                let order = argsort_desc(&cand_scores);
                let mut row = raw.slice_mut(ndarray::s![bi, hi, r, ..]);
                for (slot, &pos) in order.iter().take(scored_slots).enumerate() {
                    row[slot] = admissible[pos] as i64;
                }
                for (off, &j) in locals.iter().enumerate() {
                    row[scored_slots + off] = j as i64;
                }
            }
        }
    }
    Ok(raw)
}
