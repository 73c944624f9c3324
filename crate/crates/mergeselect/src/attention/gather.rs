use ndarray::{Array2, Array4};

use crate::error::{MsError, Result};
use crate::num::Real;
use crate::positional::{rope_apply, rope_unapply, PosEncoding};

use super::{AttnStats, MsConfig, RoutePlan};

/// Per-group state pinned by the forward pass so the backward pass replays
/// the exact same routing and softmax weights.
pub struct GroupCache<F> {
    /// Batch and head this group belongs to.
    pub bh: (usize, usize),
    /// Padded-token indices of the group's Q rows (merges · s_q of them).
    pub q_tokens: Vec<usize>,
    /// Padded-token indices of the gathered KV rows (topn · s_k); −1 marks
    /// sentinel slots.
    pub kv_tokens: Vec<i64>,
    /// Post-softmax attention weights (masked entries and padded Q rows
    /// exactly zero).
    pub attn: Array2<F>,
    /// Rotated gathered Q and K, and gathered V.
    pub q_rot: Array2<F>,
    pub k_rot: Array2<F>,
    pub v_gath: Array2<F>,
}

pub struct AttnCache<F> {
    pub groups: Vec<GroupCache<F>>,
    pub dims: (usize, usize, usize, usize),
    /// Valid (unpadded) token count.
    pub n: usize,
    /// Padded token count.
    pub n_pad: usize,
}

/// Runs masked scaled-dot-product attention per merged group over the
/// gathered KV regions. Q and gathered K are rotated by original token
/// position after the gather; the causal mask compares original token
/// indices, which also silences sentinel slots, padding, and the partial
/// future inside local regions.
#[allow(clippy::too_many_arguments)]
pub fn gather_and_attend<F: Real>(
    q: &Array4<F>,
    k: &Array4<F>,
    v: &Array4<F>,
    ids: &Array2<i64>,
    plan: &RoutePlan,
    cfg: &MsConfig,
    enc: &PosEncoding,
    n: usize,
    stats: &mut AttnStats,
) -> Result<(Array4<F>, AttnCache<F>)> {
    let (b, h, n_pad, d) = q.dim();
    let n_groups = plan.merged.dim().2;
    let msq = cfg.merges * cfg.s_q;
    let l = cfg.topn * cfg.s_k;
    let inv_sqrt_d = F::from_f64(1.0 / (d as f64).sqrt());
    let mut out = Array4::<F>::zeros((b, h, n_pad, d));
    let mut groups = Vec::with_capacity(b * h * n_groups);
    for bi in 0..b {
        for hi in 0..h {
            for g in 0..n_groups {
                let members = plan.group_members(bi, hi, g, cfg.merges);
                let mut q_tokens = Vec::with_capacity(msq);
                for &r in &members {
                    q_tokens.extend(r * cfg.s_q..(r + 1) * cfg.s_q);
                }
                let mut kv_tokens = Vec::with_capacity(l);
                for slot in 0..cfg.topn {
                    let j = plan.merged[[bi, hi, g, slot]];
                    for off in 0..cfg.s_k {
                        kv_tokens.push(if j >= 0 {
                            j * cfg.s_k as i64 + off as i64
                        } else {
                            -1
                        });
                    }
                }

                let mut q_rot = Array2::<F>::zeros((msq, d));
                let mut pos_q = vec![-1i64; msq];
                for (row, &t) in q_tokens.iter().enumerate() {
                    q_rot
                        .row_mut(row)
                        .assign(&q.slice(ndarray::s![bi, hi, t, ..]));
                    pos_q[row] = ids[[bi, t]];
                }
                let mut k_rot = Array2::<F>::zeros((l, d));
                let mut v_gath = Array2::<F>::zeros((l, d));
                let mut pos_k = vec![-1i64; l];
                for (row, &t) in kv_tokens.iter().enumerate() {
                    if t >= 0 {
                        let t = t as usize;
                        k_rot
                            .row_mut(row)
                            .assign(&k.slice(ndarray::s![bi, hi, t, ..]));
                        v_gath
                            .row_mut(row)
                            .assign(&v.slice(ndarray::s![bi, hi, t, ..]));
                        pos_k[row] = ids[[bi, t]];
                    }
                }
                stats.gathered_elems += (l * d) as u64;

                rope_apply(q_rot.view_mut(), &pos_q, enc)?;
                rope_apply(k_rot.view_mut(), &pos_k, enc)?;

                let mut logits = q_rot.dot(&k_rot.t());
                logits.mapv_inplace(|x| x * inv_sqrt_d);
                stats.attention_mas += (msq * l * d) as u64;

                let mut attn = Array2::<F>::zeros((msq, l));
                for (qi, &tq) in q_tokens.iter().enumerate() {
                    let q_valid = tq < n;
                    let mut max = F::neg_infinity();
                    let mut any = false;
                    for (ki, &tk) in kv_tokens.iter().enumerate() {
                        if tk >= 0 && (tk as usize) < n && tk <= tq as i64 {
                            any = true;
                            max = max.max(logits[[qi, ki]]);
                        }
                    }
                    if !any {
                        if q_valid {
                            return Err(MsError::InvalidConfig(format!(
                                "token {} has no admissible keys; enable \
                                 force_local or widen the selection",
                                tq
                            )));
                        }
                        continue;
                    }
                    let mut z = F::zero();
                    for (ki, &tk) in kv_tokens.iter().enumerate() {
                        if tk >= 0 && (tk as usize) < n && tk <= tq as i64 {
                            let e = (logits[[qi, ki]] - max).exp();
                            attn[[qi, ki]] = e;
                            z += e;
                        }
                    }
                    let inv_z = F::one() / z;
                    for ki in 0..l {
                        attn[[qi, ki]] = attn[[qi, ki]] * inv_z;
                    }
                }

                let block = attn.dot(&v_gath);
                stats.attention_mas += (msq * l * d) as u64;
                for (row, &t) in q_tokens.iter().enumerate() {
                    if t < n {
                        out.slice_mut(ndarray::s![bi, hi, t, ..])
                            .assign(&block.row(row));
                    }
                }
                groups.push(GroupCache {
                    bh: (bi, hi),
                    q_tokens,
                    kv_tokens,
                    attn,
                    q_rot,
                    k_rot,
                    v_gath,
                });
            }
        }
    }
    Ok((
        out,
        AttnCache {
            groups,
            dims: (b, h, n_pad, d),
            n,
            n_pad,
        },
    ))
}

/// Backward of [`gather_and_attend`] with routing held fixed. Returns padded
/// (dq, dk, dv); KV gradients scatter-add because a region can be gathered
/// by many groups, Q gradients scatter once.
pub fn gather_backward<F: Real>(
    d_out: &Array4<F>,
    ids: &Array2<i64>,
    enc: &PosEncoding,
    cache: &AttnCache<F>,
) -> Result<(Array4<F>, Array4<F>, Array4<F>)> {
    let (b, h, n_pad, d) = cache.dims;
    if d_out.dim() != (b, h, n_pad, d) {
        return Err(MsError::ShapeMismatch(format!(
            "d_out {:?} vs cached dims {:?}",
            d_out.dim(),
            cache.dims
        )));
    }
    let inv_sqrt_d = F::from_f64(1.0 / (d as f64).sqrt());
    let mut dq = Array4::<F>::zeros((b, h, n_pad, d));
    let mut dk = Array4::<F>::zeros((b, h, n_pad, d));
    let mut dv = Array4::<F>::zeros((b, h, n_pad, d));
    for gc in &cache.groups {
        let (bi, hi) = gc.bh;
        let msq = gc.q_tokens.len();
        let mut d_block = Array2::<F>::zeros((msq, d));
        for (row, &t) in gc.q_tokens.iter().enumerate() {
            if t < cache.n {
                d_block
                    .row_mut(row)
                    .assign(&d_out.slice(ndarray::s![bi, hi, t, ..]));
            }
        }

        // dV = Aᵀ dO; dA = dO Vᵀ; dS = A ⊙ (dA − rowsum(dA ⊙ A)).
        let dv_g = gc.attn.t().dot(&d_block);
        let da = d_block.dot(&gc.v_gath.t());
        let mut ds = Array2::<F>::zeros(gc.attn.raw_dim());
        for qi in 0..msq {
            let mut dot = F::zero();
            for ki in 0..gc.attn.ncols() {
                dot += da[[qi, ki]] * gc.attn[[qi, ki]];
            }
            for ki in 0..gc.attn.ncols() {
                ds[[qi, ki]] = gc.attn[[qi, ki]] * (da[[qi, ki]] - dot);
            }
        }

        let mut dq_rot = ds.dot(&gc.k_rot);
        dq_rot.mapv_inplace(|x| x * inv_sqrt_d);
        let mut dk_rot = ds.t().dot(&gc.q_rot);
        dk_rot.mapv_inplace(|x| x * inv_sqrt_d);

        // The rotation is orthogonal per token, so pulling gradients back
        // through it is the inverse rotation at the same positions.
        let pos_q: Vec<i64> = gc.q_tokens.iter().map(|&t| ids[[bi, t]]).collect();
        let pos_k: Vec<i64> = gc
            .kv_tokens
            .iter()
            .map(|&t| if t >= 0 { ids[[bi, t as usize]] } else { -1 })
            .collect();
        rope_unapply(dq_rot.view_mut(), &pos_q, enc)?;
        rope_unapply(dk_rot.view_mut(), &pos_k, enc)?;

        for (row, &t) in gc.q_tokens.iter().enumerate() {
            let mut slot = dq.slice_mut(ndarray::s![bi, hi, t, ..]);
            slot += &dq_rot.row(row);
        }
        for (row, &t) in gc.kv_tokens.iter().enumerate() {
            if t >= 0 {
                let t = t as usize;
                let mut kslot = dk.slice_mut(ndarray::s![bi, hi, t, ..]);
                kslot += &dk_rot.row(row);
                let mut vslot = dv.slice_mut(ndarray::s![bi, hi, t, ..]);
                vslot += &dv_g.row(row);
            }
        }
    }
    Ok((dq, dk, dv))
}
