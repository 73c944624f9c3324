//! Chunked inference with a multi-scale compressed history.
//!
//! A sequence is processed in fixed-size chunks. After each chunk, its
//! hidden states are compressed at several scales (trailing `range` tokens
//! mean-pooled in groups of `ratio`) and concatenated into a fixed-width
//! history. The next chunk attends to the current tokens under a causal
//! mask and to the projected history without one, and the two parts are
//! blended by their softmax masses:
//!
//! ```text
//! O = cc/(c+cc) · softmax(Q K_histᵀ) V_hist
//!   + c/(c+cc) · softmax_mask(Q K_curᵀ) V_cur
//! ```
//!
//! with c and cc the per-query exp-sums of the two logit sets under one
//! shared maximum. With that reading the blend equals a single softmax over
//! the concatenation, so an uncompressed full-range history reproduces
//! dense attention over both chunks. Memory stays constant in the number of
//! chunks: only the last chunk's compressed states are kept.
//!
//! Compression acts on hidden states before projection (history keys are
//! `X^p W_k`), and a compressed token's position is the floor of its
//! members' mean position.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{MsError, Result};
use crate::num::{ensure_finite, Real};
use crate::positional::{rope_apply, PosEncoding};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    /// Pooling group size; 1 keeps tokens as they are.
    pub ratio: usize,
    /// Trailing window of the chunk this scale covers, in tokens.
    pub range: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecursionCfg {
    pub scales: Vec<ScaleSpec>,
    pub chunk: usize,
}

impl RecursionCfg {
    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 {
            return Err(MsError::InvalidConfig("chunk size must be positive".into()));
        }
        if self.scales.is_empty() {
            return Err(MsError::InvalidConfig("at least one scale required".into()));
        }
        for s in &self.scales {
            if s.ratio == 0 {
                return Err(MsError::InvalidConfig("scale ratio must be >= 1".into()));
            }
            if s.range == 0 || s.range % s.ratio != 0 {
                return Err(MsError::InvalidConfig(format!(
                    "range {} not divisible by ratio {}",
                    s.range, s.ratio
                )));
            }
        }
        Ok(())
    }

    /// Largest per-scale attention range; the compressed history must fit
    /// inside it, otherwise compression is skipped for the chunk.
    pub fn max_range(&self) -> usize {
        self.scales.iter().map(|s| s.range).max().unwrap_or(0)
    }

    /// Width of the concatenated compressed history when every scale sees
    /// its full range.
    pub fn compressed_width(&self) -> usize {
        self.scales.iter().map(|s| s.range / s.ratio).sum()
    }
}

/// Rolling compressed history: the previous chunk's multi-scale pooled
/// hidden states and their positions.
#[derive(Clone, Debug, Default)]
pub struct RecurrentState<F> {
    pub hist_x: Option<Array2<F>>,
    pub hist_pos: Vec<i64>,
    pub chunks: u64,
}

impl<F: Real> RecurrentState<F> {
    pub fn new() -> Self {
        RecurrentState {
            hist_x: None,
            hist_pos: Vec::new(),
            chunks: 0,
        }
    }

    /// Heap bytes held by the state; constant across chunks once warm.
    pub fn byte_size(&self) -> usize {
        let x = self
            .hist_x
            .as_ref()
            .map(|a| a.len() * std::mem::size_of::<F>())
            .unwrap_or(0);
        x + self.hist_pos.len() * std::mem::size_of::<i64>()
    }

    pub fn absorb_chunk(
        &mut self,
        x_chunk: &Array2<F>,
        pos: &[i64],
        cfg: &RecursionCfg,
    ) -> Result<()> {
        let (x, p) = compress_chunk(x_chunk, pos, cfg)?;
        self.hist_x = Some(x);
        self.hist_pos = p;
        self.chunks += 1;
        Ok(())
    }
}

/// Multi-scale compression of one chunk: per scale, the trailing `range`
/// tokens (or the available prefix of them) pooled in groups of `ratio`;
/// scales concatenated in order. If the concatenated width would exceed the
/// largest range, the chunk is kept uncompressed instead.
pub fn compress_chunk<F: Real>(
    x: &Array2<F>,
    pos: &[i64],
    cfg: &RecursionCfg,
) -> Result<(Array2<F>, Vec<i64>)> {
    cfg.validate()?;
    let (n, d) = x.dim();
    if pos.len() != n {
        return Err(MsError::ShapeMismatch(format!(
            "{} positions for {} tokens",
            pos.len(),
            n
        )));
    }
    ensure_finite("chunk", x)?;
    if cfg.compressed_width() > cfg.max_range() {
        return Ok((x.clone(), pos.to_vec()));
    }
    let mut rows: Vec<Array1<F>> = Vec::new();
    let mut out_pos: Vec<i64> = Vec::new();
    for s in &cfg.scales {
        let take = s.range.min(n);
        let start = n - take;
        let groups = take / s.ratio;
        // A trailing remainder shorter than one group is dropped rather
        // than padded; absent rows need no mask.
        let tail_off = start + take - groups * s.ratio;
        for g in 0..groups {
            let lo = tail_off + g * s.ratio;
            let hi = lo + s.ratio;
            let slice = x.slice(ndarray::s![lo..hi, ..]);
            let inv = F::from_f64(1.0 / s.ratio as f64);
            rows.push(slice.sum_axis(ndarray::Axis(0)) * inv);
            let psum: i64 = pos[lo..hi].iter().sum();
            out_pos.push(psum.div_euclid(s.ratio as i64));
        }
    }
    let mut out = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok((out, out_pos))
}

pub struct BlendOutput<F> {
    pub out: Array2<F>,
    /// Per-query history mass fraction cc/(c+cc); 0 when no history.
    pub w_hist: Vec<F>,
    /// Per-query current-chunk fraction, exactly 1 − w_hist.
    pub w_cur: Vec<F>,
}

/// One chunk of blended attention. Current-chunk keys are causally masked
/// by position; history keys are all visible (they summarize strictly older
/// tokens). Both logit sets share one maximum, making the blend a single
/// softmax over the concatenation.
#[allow(clippy::too_many_arguments)]
pub fn recurrent_attend<F: Real>(
    q: &Array2<F>,
    q_pos: &[i64],
    k_cur: &Array2<F>,
    v_cur: &Array2<F>,
    cur_pos: &[i64],
    hist: Option<(&Array2<F>, &Array2<F>, &[i64])>,
    enc: &PosEncoding,
) -> Result<BlendOutput<F>> {
    let (n, d) = q.dim();
    if k_cur.dim() != v_cur.dim() || k_cur.ncols() != d {
        return Err(MsError::ShapeMismatch("current kv disagree with q".into()));
    }
    let inv_sqrt_d = F::from_f64(1.0 / (d as f64).sqrt());

    let mut qr = q.clone();
    rope_apply(qr.view_mut(), q_pos, enc)?;
    let mut kr = k_cur.clone();
    rope_apply(kr.view_mut(), cur_pos, enc)?;
    let mut logits = qr.dot(&kr.t());
    logits.mapv_inplace(|x| x * inv_sqrt_d);

    let hist_parts = match hist {
        Some((hx, hv, hpos)) => {
            let mut hk = hx.clone();
            rope_apply(hk.view_mut(), hpos, enc)?;
            let mut hl = qr.dot(&hk.t());
            hl.mapv_inplace(|x| x * inv_sqrt_d);
            Some((hl, hv))
        }
        None => None,
    };

    let mut out = Array2::<F>::zeros((n, d));
    let mut w_hist = vec![F::zero(); n];
    let mut w_cur = vec![F::one(); n];
    for t in 0..n {
        let admissible: Vec<usize> = (0..k_cur.nrows())
            .filter(|&j| cur_pos[j] <= q_pos[t])
            .collect();
        let mut max = F::neg_infinity();
        for &j in &admissible {
            max = max.max(logits[[t, j]]);
        }
        if let Some((hl, _)) = &hist_parts {
            for u in 0..hl.ncols() {
                max = max.max(hl[[t, u]]);
            }
        }
        if max == F::neg_infinity() {
            return Err(MsError::InvalidConfig(format!(
                "query {t} sees no keys at all"
            )));
        }

        let mut w = vec![F::zero(); admissible.len()];
        let mut c = F::zero();
        for (i, &j) in admissible.iter().enumerate() {
            let e = (logits[[t, j]] - max).exp();
            w[i] = e;
            c += e;
        }
        let mut cc = F::zero();
        if let Some((hl, _)) = &hist_parts {
            for u in 0..hl.ncols() {
                cc += (hl[[t, u]] - max).exp();
            }
        }

        let mut row = out.row_mut(t);
        if let Some((hl, hv)) = &hist_parts {
            let wh = cc / (c + cc);
            let wc = F::one() - wh;
            w_hist[t] = wh;
            w_cur[t] = wc;
            for u in 0..hl.ncols() {
                let a = (hl[[t, u]] - max).exp() / cc * wh;
                row.scaled_add(a, &hv.row(u));
            }
            for (i, &j) in admissible.iter().enumerate() {
                row.scaled_add(w[i] / c * wc, &v_cur.row(j));
            }
        } else {
            for (i, &j) in admissible.iter().enumerate() {
                row.scaled_add(w[i] / c, &v_cur.row(j));
            }
        }
    }
    Ok(BlendOutput { out, w_hist, w_cur })
}

pub struct RecurrentRun<F> {
    pub out: Array2<F>,
    /// State heap bytes after each processed chunk.
    pub state_bytes: Vec<usize>,
    /// Mean history mass fraction per chunk.
    pub hist_mass: Vec<f64>,
}

/// Drives a single-head attention layer over a long sequence chunk by
/// chunk: projects each chunk with the given weights, attends with the
/// rolling compressed history, then replaces the history with the chunk's
/// own compression.
pub fn recurrent_forward<F: Real>(
    x: &Array2<F>,
    pos: &[i64],
    wq: &Array2<F>,
    wk: &Array2<F>,
    wv: &Array2<F>,
    cfg: &RecursionCfg,
    enc: &PosEncoding,
) -> Result<RecurrentRun<F>> {
    cfg.validate()?;
    let (n, _dim) = x.dim();
    if pos.len() != n {
        return Err(MsError::ShapeMismatch("positions vs tokens".into()));
    }
    let d = wq.ncols();
    let mut out = Array2::<F>::zeros((n, d));
    let mut state = RecurrentState::<F>::new();
    let mut state_bytes = Vec::new();
    let mut hist_mass = Vec::new();
    let mut start = 0usize;
    while start < n {
        let end = (start + cfg.chunk).min(n);
        let xc = x.slice(ndarray::s![start..end, ..]).to_owned();
        let pc = &pos[start..end];
        let q = xc.dot(wq);
        let kc = xc.dot(wk);
        let vc = xc.dot(wv);
        let hist_proj = state.hist_x.as_ref().map(|hx| (hx.dot(wk), hx.dot(wv)));
        let hist = hist_proj
            .as_ref()
            .map(|(hk, hv)| (hk, hv, state.hist_pos.as_slice()));
        let blend = recurrent_attend(
            &q,
            pc,
            &kc,
            &vc,
            pc,
            hist.map(|(hk, hv, hp)| (hk, hv, hp)),
            enc,
        )?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&blend.out);
        hist_mass.push(
            blend.w_hist.iter().map(|w| w.into_f64()).sum::<f64>()
                / blend.w_hist.len() as f64,
        );
        state.absorb_chunk(&xc, pc, cfg)?;
        state_bytes.push(state.byte_size());
        start = end;
    }
    Ok(RecurrentRun {
        out,
        state_bytes,
        hist_mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand2(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f32> {
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0f32..1.0))
    }

    fn iota(n: usize) -> Vec<i64> {
        (0..n as i64).collect()
    }

    #[test]
    fn ratio_one_is_identity_on_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand2(&mut rng, 16, 3);
        let cfg = RecursionCfg {
            scales: vec![ScaleSpec { ratio: 1, range: 8 }],
            chunk: 16,
        };
        let (c, p) = compress_chunk(&x, &iota(16), &cfg).unwrap();
        assert_eq!(c, x.slice(ndarray::s![8.., ..]).to_owned());
        assert_eq!(p, (8..16).collect::<Vec<i64>>());
    }

    #[test]
    fn paper_scale_widths() {
        let cfg = RecursionCfg {
            scales: vec![
                ScaleSpec { ratio: 1, range: 4096 },
                ScaleSpec { ratio: 2, range: 8192 },
                ScaleSpec { ratio: 4, range: 16384 },
            ],
            chunk: 16384,
        };
        let x = Array2::<f32>::zeros((16384, 1));
        let (c, _) = compress_chunk(&x, &iota(16384), &cfg).unwrap();
        assert_eq!(cfg.compressed_width(), 3 * 4096);
        assert_eq!(c.nrows(), 3 * 4096);
        assert!(cfg.compressed_width() <= cfg.max_range());
    }

    #[test]
    fn pooled_rows_equal_group_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand2(&mut rng, 256, 4);
        let cfg = RecursionCfg {
            scales: vec![
                ScaleSpec { ratio: 1, range: 64 },
                ScaleSpec { ratio: 2, range: 128 },
            ],
            chunk: 256,
        };
        let (c, p) = compress_chunk(&x, &iota(256), &cfg).unwrap();
        assert_eq!(c.nrows(), 64 + 64);
        for (row, t) in (192..256).enumerate() {
            for col in 0..4 {
                assert_eq!(c[[row, col]], x[[t, col]]);
            }
            assert_eq!(p[row], t as i64);
        }
        for g in 0..64 {
            let (a, b) = (128 + 2 * g, 128 + 2 * g + 1);
            for col in 0..4 {
                let want = (x[[a, col]] + x[[b, col]]) / 2.0;
                assert!((c[[64 + g, col]] - want).abs() < 1e-6);
            }
            assert_eq!(p[64 + g], (a as i64 + b as i64) / 2);
        }
    }

    #[test]
    fn oversized_concat_falls_back_to_uncompressed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand2(&mut rng, 64, 2);
        let cfg = RecursionCfg {
            scales: vec![
                ScaleSpec { ratio: 1, range: 48 },
                ScaleSpec { ratio: 1, range: 32 },
            ],
            chunk: 64,
        };
        assert!(cfg.compressed_width() > cfg.max_range());
        let (c, p) = compress_chunk(&x, &iota(64), &cfg).unwrap();
        assert_eq!(c, x);
        assert_eq!(p.len(), 64);
    }

    #[test]
    fn short_chunk_compresses_available_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand2(&mut rng, 10, 2);
        let cfg = RecursionCfg {
            scales: vec![ScaleSpec { ratio: 2, range: 64 }],
            chunk: 64,
        };
        let (c, _) = compress_chunk(&x, &iota(10), &cfg).unwrap();
        assert_eq!(c.nrows(), 5);
    }

    #[test]
    fn uniform_logits_blend_value_means() {
        // Zero keys and queries make every logit 0; each part averages its
        // values uniformly and the blend weighs them by key counts.
        let d = 2;
        let q = Array2::<f32>::zeros((1, d));
        let k_cur = Array2::<f32>::zeros((3, d));
        let mut v_cur = Array2::<f32>::zeros((3, d));
        v_cur.fill(3.0);
        let hx = Array2::<f32>::zeros((5, d));
        let mut hv = Array2::<f32>::zeros((5, d));
        hv.fill(-1.0);
        let hpos = vec![0i64, 1, 2, 3, 4];
        let blend = recurrent_attend(
            &q,
            &[10],
            &k_cur,
            &v_cur,
            &[8, 9, 10],
            Some((&hx, &hv, hpos.as_slice())),
            &PosEncoding::rope(d),
        )
        .unwrap();
        let want = (5.0 * -1.0 + 3.0 * 3.0) / 8.0;
        assert!((blend.out[[0, 0]] - want).abs() < 1e-6);
        assert_eq!(blend.w_hist[0] + blend.w_cur[0], 1.0);
        assert!((blend.w_hist[0] - 5.0 / 8.0).abs() < 1e-6);
    }

    #[test]
    fn blend_weights_conserve_mass_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 8;
        let q = rand2(&mut rng, 6, d);
        let k = rand2(&mut rng, 6, d);
        let v = rand2(&mut rng, 6, d);
        let hx = rand2(&mut rng, 4, d);
        let hv = rand2(&mut rng, 4, d);
        let hpos = vec![0i64, 1, 2, 3];
        let blend = recurrent_attend(
            &q,
            &[6, 7, 8, 9, 10, 11],
            &k,
            &v,
            &[6, 7, 8, 9, 10, 11],
            Some((&hx, &hv, hpos.as_slice())),
            &PosEncoding::rope(d),
        )
        .unwrap();
        for t in 0..6 {
            assert_eq!(blend.w_hist[t] + blend.w_cur[t], 1.0);
            assert!(blend.w_hist[t] > 0.0);
        }
    }

    #[test]
    fn state_memory_is_constant_across_chunks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (dim, d, chunk) = (6, 4, 32);
        let n = chunk * 10;
        let x = rand2(&mut rng, n, dim);
        let wq = rand2(&mut rng, dim, d);
        let wk = rand2(&mut rng, dim, d);
        let wv = rand2(&mut rng, dim, d);
        let cfg = RecursionCfg {
            scales: vec![
                ScaleSpec { ratio: 1, range: 8 },
                ScaleSpec { ratio: 2, range: 16 },
                ScaleSpec { ratio: 4, range: 32 },
            ],
            chunk,
        };
        let pos = iota(n);
        let run =
            recurrent_forward(&x, &pos, &wq, &wk, &wv, &cfg, &PosEncoding::rope(d))
                .unwrap();
        assert_eq!(run.state_bytes.len(), 10);
        let first = run.state_bytes[0];
        assert!(run.state_bytes.iter().all(|&b| b == first));
        assert!(run.hist_mass[0] == 0.0 && run.hist_mass[1] > 0.0);
    }
}
