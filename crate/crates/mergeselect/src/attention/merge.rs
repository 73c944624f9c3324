use ndarray::{Array4, ArrayView1};

use crate::error::{MsError, Result};

use super::{MsConfig, PermRecord};

/// Merges every `merges` consecutive Q-region rows into one shared
/// selection. Grouping follows the natural region order.
pub fn merge_indices(raw: &Array4<i64>, cfg: &MsConfig) -> Result<Array4<i64>> {
    merge_with_order(raw, None, cfg)
}

/// As [`merge_indices`], but groups follow the forward permutation when one
/// is given: group g holds the regions at sorted positions
/// [g·merges, (g+1)·merges).
pub(crate) fn merge_with_order(
    raw: &Array4<i64>,
    perm: Option<&PermRecord>,
    cfg: &MsConfig,
) -> Result<Array4<i64>> {
    let (b, h, n_sq, _topk) = raw.dim();
    if n_sq % cfg.merges != 0 {
        return Err(MsError::ShapeMismatch(format!(
            "{} Q regions not divisible by merges {}",
            n_sq, cfg.merges
        )));
    }
    let n_groups = n_sq / cfg.merges;
    let mut merged = Array4::from_elem((b, h, n_groups, cfg.topn), -1i64);
    for bi in 0..b {
        for hi in 0..h {
            for g in 0..n_groups {
                let members: Vec<usize> = (g * cfg.merges..(g + 1) * cfg.merges)
                    .map(|pos| match perm {
                        Some(p) => p.forward[[bi, hi, pos]],
                        None => pos,
                    })
                    .collect();
                let rows: Vec<ArrayView1<'_, i64>> = members
                    .iter()
                    .map(|&r| raw.slice(ndarray::s![bi, hi, r, ..]))
                    .collect();
                let row = merge_rows(&rows, &members, cfg)?;
                for (slot, idx) in row.into_iter().enumerate() {
                    merged[[bi, hi, g, slot]] = idx;
                }
            }
        }
    }
    Ok(merged)
}

/// Interleaves the member rows rank-major (all rank-0 picks, then all
/// rank-1 picks, ...) and deduplicates keeping first occurrence. Sentinels
/// are dropped. This is the (m, topk) → transpose → flatten → unique step.
pub fn interleave_dedupe(rows: &[ArrayView1<'_, i64>]) -> Vec<i64> {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut out: Vec<i64> = Vec::new();
    for slot in 0..width {
        for row in rows {
            if slot >= row.len() {
                continue;
            }
            let idx = row[slot];
            if idx >= 0 && !out.contains(&idx) {
                out.push(idx);
            }
        }
    }
    out
}

/// One group's merged selection: the deduplicated interleave truncated to
/// `topn` entries, except that members' local regions are always retained
/// and only the remaining budget goes to ranked non-locals. Output keeps the
/// dedup order and pads with −1.
pub fn merge_rows(
    rows: &[ArrayView1<'_, i64>],
    members: &[usize],
    cfg: &MsConfig,
) -> Result<Vec<i64>> {
    let deduped = interleave_dedupe(rows);
    let mut locals: Vec<i64> = Vec::new();
    if cfg.force_local {
        for &m in members {
            for j in cfg.locals_of(m) {
                if !locals.contains(&(j as i64)) {
                    locals.push(j as i64);
                }
            }
        }
    }
    let present_locals = deduped.iter().filter(|i| locals.contains(i)).count();
    let mut budget = cfg.topn.checked_sub(present_locals).ok_or_else(|| {
        MsError::InvalidConfig(format!(
            "group of regions {:?} carries {} local regions but topn is {}",
            members, present_locals, cfg.topn
        ))
    })?;
    let mut out: Vec<i64> = Vec::with_capacity(cfg.topn);
    for idx in deduped {
        if locals.contains(&idx) {
            out.push(idx);
        } else if budget > 0 {
            out.push(idx);
            budget -= 1;
        }
    }
    out.resize(cfg.topn, -1);
    Ok(out)
}
