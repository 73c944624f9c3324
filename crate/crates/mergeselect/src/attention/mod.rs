//! Merge-select sparse attention.
//!
//! The pipeline per (batch, head):
//!
//! ```text
//! 1. partition Q and K into regions of s_q / s_k tokens, compress each
//!    region to one representative (mean or one-step semantic refinement)
//! 2. score representatives with a dot product, keep the top-k admissible
//!    KV regions per Q region (causally gated, own region exempt)
//! 3. optionally reorder Q regions by a base-b digit score so regions with
//!    similar selections become neighbors
//! 4. merge m consecutive Q regions: interleave their rows rank-major,
//!    deduplicate keeping first occurrence, retain top-n (locals always)
//! 5. gather the retained KV regions, rotate Q and gathered K by original
//!    token position, run masked scaled-dot-product attention per group
//! ```
//!
//! Selection operates on representatives before any position encoding;
//! rotation happens after gather, so retrieval is position-free while
//! attention itself remains position-aware.

mod compress;
mod flops;
mod gather;
mod merge;
mod oracle;
mod permute;
mod select;

pub use compress::partition_and_compress;
pub use flops::{flop_account, FlopAccount};
pub use gather::{gather_and_attend, gather_backward, AttnCache};
pub use merge::{interleave_dedupe, merge_indices, merge_rows};
pub use oracle::{dense_causal_oracle, dense_mas};
pub use permute::perm_score;
pub use select::select_topk;

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MsError, Result};
use crate::num::{ensure_finite, lcm, Real};
use crate::positional::PosEncoding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprMode {
    Mean,
    Semantic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsConfig {
    /// Q region size in tokens.
    pub s_q: usize,
    /// KV region size in tokens.
    pub s_k: usize,
    /// Row width of the raw selection; with `force_local` the last slots of
    /// each row hold the region's own (unscored) KV regions.
    pub topk: usize,
    /// Number of Q regions merged into one shared selection.
    pub merges: usize,
    /// KV regions retained per merged group.
    pub topn: usize,
    /// Keep each Q region's own KV region unconditionally and exempt it
    /// from scoring.
    pub force_local: bool,
    /// Reorder Q regions by selection-digit score before grouping.
    pub permute: bool,
    /// Base b of the reordering score.
    pub perm_base: u32,
    /// Number of leading row entries the reordering score reads.
    pub perm_width: usize,
    pub repr_mode: ReprMode,
}

impl Default for MsConfig {
    fn default() -> Self {
        MsConfig {
            s_q: 16,
            s_k: 16,
            topk: 10,
            merges: 4,
            topn: 16,
            force_local: true,
            permute: false,
            perm_base: 5,
            perm_width: 10,
            repr_mode: ReprMode::Mean,
        }
    }
}

impl MsConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |msg: String| Err(MsError::InvalidConfig(msg));
        if self.s_q == 0 || self.s_k == 0 {
            return bad("region sizes must be positive".into());
        }
        if self.merges == 0 {
            return bad("merges must be at least 1".into());
        }
        if self.topk == 0 || self.topk > n.div_ceil(self.s_k) {
            return bad(format!(
                "topk {} outside 1..=ceil(n/s_k) = {}",
                self.topk,
                n.div_ceil(self.s_k)
            ));
        }
        if self.topn == 0 || self.topn > self.topk * self.merges {
            return bad(format!(
                "topn {} outside 1..=topk*merges = {}",
                self.topn,
                self.topk * self.merges
            ));
        }
        if self.force_local && self.topn < self.merges {
            return bad(format!(
                "force_local needs topn >= merges, got {} < {}",
                self.topn, self.merges
            ));
        }
        if self.permute {
            if self.perm_base < 2 {
                return bad("perm_base must be at least 2".into());
            }
            if self.perm_width == 0 || self.perm_width > self.topk {
                return bad(format!(
                    "perm_width {} outside 1..=topk = {}",
                    self.perm_width, self.topk
                ));
            }
        }
        Ok(())
    }

    /// Tokens are right-padded to this multiple so Q groups and KV regions
    /// tile exactly.
    pub fn padded_len(&self, n: usize) -> usize {
        let unit = lcm(self.s_q * self.merges, self.s_k);
        n.div_ceil(unit) * unit
    }

    /// KV regions whose span [j·s_k, (j+1)·s_k) overlaps Q region r's span.
    /// With congruent grids (s_q == s_k) this is just {r}.
    pub fn locals_of(&self, r: usize) -> std::ops::RangeInclusive<usize> {
        let start = r * self.s_q;
        let end = start + self.s_q - 1;
        (start / self.s_k)..=(end / self.s_k)
    }

    /// First token of the span that gates region r's scored candidates:
    /// the merged group's start when grouping is positional (no permute),
    /// the region's own start otherwise. A KV region is admissible iff it
    /// lies entirely before this token.
    pub fn gate_token(&self, r: usize) -> usize {
        if self.permute {
            r * self.s_q
        } else {
            (r / self.merges) * self.merges * self.s_q
        }
    }
}

/// Raw and merged selections. Sentinel −1 pads short rows and is ignored
/// everywhere downstream (score 0, logit −∞).
#[derive(Clone, Debug, PartialEq)]
pub struct SelectIndex {
    /// (b, h, n_sq, topk), scored entries in descending relevance; with
    /// `force_local` each row ends with the region's own KV regions.
    pub raw: Array4<i64>,
    /// (b, h, n_groups, topn), deduplicated, first occurrence order.
    pub merged: Array4<i64>,
}

/// Q-region reordering derived from the raw selection digits.
#[derive(Clone, Debug, PartialEq)]
pub struct PermRecord {
    /// (b, h, n_sq) digit scores.
    pub scores: Array3<f64>,
    /// (b, h, n_sq): forward[p] = region placed at sorted position p.
    pub forward: Array3<usize>,
    /// (b, h, n_sq): inverse[r] = sorted position of region r.
    pub inverse: Array3<usize>,
}

/// Routing decided for one batch: selections plus optional reordering.
/// Group g of head (b, h) consists of the Q regions
/// `order(b, h)[g*merges .. (g+1)*merges]` where `order` is the forward
/// permutation, or the identity when `perm` is None.
#[derive(Clone, Debug)]
pub struct RoutePlan {
    pub raw: Array4<i64>,
    pub perm: Option<PermRecord>,
    pub merged: Array4<i64>,
}

impl RoutePlan {
    /// True Q-region ids making up group g of head (b, h).
    pub fn group_members(&self, b: usize, h: usize, g: usize, merges: usize) -> Vec<usize> {
        let lo = g * merges;
        match &self.perm {
            Some(p) => (lo..lo + merges).map(|pos| p.forward[[b, h, pos]]).collect(),
            None => (lo..lo + merges).collect(),
        }
    }
}

/// Exact multiply-add and gather counters, incremented with the dense
/// dimensions of every matmul actually issued (padded slots included), so
/// instrumented totals match the closed-form account bit for bit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttnStats {
    pub selection_mas: u64,
    pub attention_mas: u64,
    pub gathered_elems: u64,
}

impl AttnStats {
    pub fn absorb(&mut self, other: AttnStats) {
        self.selection_mas += other.selection_mas;
        self.attention_mas += other.attention_mas;
        self.gathered_elems += other.gathered_elems;
    }
}

pub struct MsOutput<F> {
    pub out: Array4<F>,
    pub cache: AttnCache<F>,
    pub stats: AttnStats,
    pub plan: RoutePlan,
}

/// Decide routing for one batch of representatives: select, optionally
/// score-and-reorder, then merge per group.
pub fn plan_routing<F: Real>(
    q_repr: &Array4<F>,
    k_repr: &Array4<F>,
    cfg: &MsConfig,
    n: usize,
    stats: &mut AttnStats,
) -> Result<RoutePlan> {
    let raw = select_topk(q_repr, k_repr, cfg, n, stats)?;
    let perm = if cfg.permute {
        let n_sk = k_repr.dim().2;
        Some(perm_score(&raw, cfg, n_sk, n)?)
    } else {
        None
    };
    let merged = merge::merge_with_order(&raw, perm.as_ref(), cfg)?;
    Ok(RoutePlan { raw, perm, merged })
}

/// Full merge-select attention over an unpadded (b, h, n, d) batch.
/// `ids[b, t]` is token t's original position; it travels with the token
/// through gather so rotation after selection still sees true positions.
pub fn ms_attention<F: Real>(
    q: &Array4<F>,
    k: &Array4<F>,
    v: &Array4<F>,
    ids: &Array2<i64>,
    cfg: &MsConfig,
    enc: &PosEncoding,
) -> Result<MsOutput<F>> {
    let (b, h, n, d) = q.dim();
    if k.dim() != (b, h, n, d) || v.dim() != (b, h, n, d) {
        return Err(MsError::ShapeMismatch(format!(
            "q {:?}, k {:?}, v {:?} must agree",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if ids.dim() != (b, n) {
        return Err(MsError::ShapeMismatch(format!(
            "ids {:?} for batch ({}, {})",
            ids.dim(),
            b,
            n
        )));
    }
    cfg.validate(n)?;
    ensure_finite("q", q)?;
    ensure_finite("k", k)?;
    ensure_finite("v", v)?;

    let n_pad = cfg.padded_len(n);
    let qp = pad_tokens(q, n_pad);
    let kp = pad_tokens(k, n_pad);
    let vp = pad_tokens(v, n_pad);
    let idp = pad_ids(ids, n_pad);

    let mut stats = AttnStats::default();
    let q_repr = partition_and_compress(&qp, cfg.s_q, cfg.repr_mode)?;
    let k_repr = partition_and_compress(&kp, cfg.s_k, cfg.repr_mode)?;
    let plan = plan_routing(&q_repr, &k_repr, cfg, n, &mut stats)?;

    let (out_pad, cache) =
        gather_and_attend(&qp, &kp, &vp, &idp, &plan, cfg, enc, n, &mut stats)?;
    let out = out_pad.slice(ndarray::s![.., .., ..n, ..]).to_owned();
    Ok(MsOutput {
        out,
        cache,
        stats,
        plan,
    })
}

/// [`ms_attention`] with routing fixed in advance: no compression or
/// scoring runs, the given plan's selections are gathered as they stand.
/// Lets callers hold routing constant while q, k, v vary, which keeps the
/// attention map differentiable around a working point.
pub fn ms_attention_pinned<F: Real>(
    q: &Array4<F>,
    k: &Array4<F>,
    v: &Array4<F>,
    ids: &Array2<i64>,
    cfg: &MsConfig,
    enc: &PosEncoding,
    plan: &RoutePlan,
) -> Result<MsOutput<F>> {
    let (b, h, n, d) = q.dim();
    if k.dim() != (b, h, n, d) || v.dim() != (b, h, n, d) {
        return Err(MsError::ShapeMismatch(format!(
            "q {:?}, k {:?}, v {:?} must agree",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    cfg.validate(n)?;
    ensure_finite("q", q)?;
    ensure_finite("k", k)?;
    ensure_finite("v", v)?;

    let n_pad = cfg.padded_len(n);
    let qp = pad_tokens(q, n_pad);
    let kp = pad_tokens(k, n_pad);
    let vp = pad_tokens(v, n_pad);
    let idp = pad_ids(ids, n_pad);

    let mut stats = AttnStats::default();
    let (out_pad, cache) =
        gather_and_attend(&qp, &kp, &vp, &idp, plan, cfg, enc, n, &mut stats)?;
    let out = out_pad.slice(ndarray::s![.., .., ..n, ..]).to_owned();
    Ok(MsOutput {
        out,
        cache,
        stats,
        plan: plan.clone(),
    })
}

/// Gradients of [`ms_attention`] with respect to q, k, v. Routing indices
/// are treated as constants (straight-through); the cache pins the exact
/// selections and softmax weights of the forward call.
pub fn ms_attention_backward<F: Real>(
    d_out: &Array4<F>,
    ids: &Array2<i64>,
    cfg: &MsConfig,
    enc: &PosEncoding,
    cache: &AttnCache<F>,
) -> Result<(Array4<F>, Array4<F>, Array4<F>)> {
    let (b, h, _, d) = cache.dims;
    let n = cache.n;
    if d_out.dim() != (b, h, n, d) {
        return Err(MsError::ShapeMismatch(format!(
            "d_out {:?} vs expected ({}, {}, {}, {})",
            d_out.dim(),
            b,
            h,
            n,
            d
        )));
    }
    let n_pad = cfg.padded_len(n);
    let dop = pad_tokens(d_out, n_pad);
    let idp = pad_ids(ids, n_pad);
    let (dq, dk, dv) = gather_backward(&dop, &idp, enc, cache)?;
    Ok((
        dq.slice(ndarray::s![.., .., ..n, ..]).to_owned(),
        dk.slice(ndarray::s![.., .., ..n, ..]).to_owned(),
        dv.slice(ndarray::s![.., .., ..n, ..]).to_owned(),
    ))
}

/// Right-pads the token axis with zeros.
pub(crate) fn pad_tokens<F: Real>(x: &Array4<F>, n_pad: usize) -> Array4<F> {
    let (b, h, n, d) = x.dim();
    if n == n_pad {
        return x.clone();
    }
    let mut out = Array4::zeros((b, h, n_pad, d));
    out.slice_mut(ndarray::s![.., .., ..n, ..]).assign(x);
    out
}

/// Right-pads position ids with −1 (no rotation, masked out).
pub(crate) fn pad_ids(ids: &Array2<i64>, n_pad: usize) -> Array2<i64> {
    let (b, n) = ids.dim();
    if n == n_pad {
        return ids.clone();
    }
    let mut out = Array2::from_elem((b, n_pad), -1i64);
    out.slice_mut(ndarray::s![.., ..n]).assign(ids);
    out
}

/// Iota position ids (b, n) for ordinary batches.
pub fn iota_ids(b: usize, n: usize) -> Array2<i64> {
    let mut ids = Array2::zeros((b, n));
    for mut row in ids.axis_iter_mut(Axis(0)) {
        for (t, slot) in row.iter_mut().enumerate() {
            *slot = t as i64;
        }
    }
    ids
}
