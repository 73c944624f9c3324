//! Perplexity, passkey retrieval, and cost accounting.
//!
//! Perplexity has two routes through the same weights: the sparse
//! merge-select forward and a dense reference that swaps only the attention
//! op. With an exhaustive sparse config the two must agree to a fraction of
//! a percent, which pins the whole eval path, not just the attention kernel.

use std::time::Instant;

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{
    dense_causal_oracle, dense_mas, flop_account, iota_ids, ms_attention, AttnStats, FlopAccount,
    MsConfig,
};
use crate::error::{MsError, Result};
use crate::model::{
    cross_entropy_next, embed_lookup, forward, from_heads, gelu, linear, rmsnorm, to_heads,
    ModelConfig, Params,
};
use crate::num::Real;
use crate::positional::PosEncoding;

use super::passkey::{gen_passkey, PasskeySpec};

/// Copy of `cfg` fitted to sequence length `n`: the budget is widened for
/// longer contexts, and for shorter ones retention is clamped to the KV
/// regions that actually exist there. The clamp never changes what is
/// attended; selecting `min(topk, regions)` of `regions` is what an
/// oversized `topk` already means.
pub fn fit_for(cfg: &ModelConfig, n: usize) -> Result<ModelConfig> {
    let mut c = cfg.clone();
    if n > c.max_seq {
        c.max_seq = n;
    }
    let a = &mut c.attn;
    a.topk = a.topk.min(n.div_ceil(a.s_k));
    a.topn = a.topn.min(a.topk * a.merges);
    a.validate(n)?;
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Route {
    Sparse,
    Dense,
}

/// exp of the mean next-token cross entropy, one value per context length.
///
/// The corpus is truncated to `ppl_tokens` and split into non-overlapping
/// windows of the context length; a trailing partial window is dropped. A
/// corpus shorter than the context is evaluated as one whole-corpus window.
pub fn eval_ppl<F: Real>(
    cfg: &ModelConfig,
    params: &Params<F>,
    enc: &PosEncoding,
    corpus: &[usize],
    lengths: &[usize],
    ppl_tokens: usize,
) -> Result<Vec<(usize, f64)>> {
    ppl_with_route(cfg, params, enc, corpus, lengths, ppl_tokens, Route::Sparse)
}

/// Same protocol with dense reference attention in every block.
pub fn eval_ppl_dense<F: Real>(
    cfg: &ModelConfig,
    params: &Params<F>,
    enc: &PosEncoding,
    corpus: &[usize],
    lengths: &[usize],
    ppl_tokens: usize,
) -> Result<Vec<(usize, f64)>> {
    ppl_with_route(cfg, params, enc, corpus, lengths, ppl_tokens, Route::Dense)
}

fn ppl_with_route<F: Real>(
    cfg: &ModelConfig,
    params: &Params<F>,
    enc: &PosEncoding,
    corpus: &[usize],
    lengths: &[usize],
    ppl_tokens: usize,
    route: Route,
) -> Result<Vec<(usize, f64)>> {
    if corpus.is_empty() {
        return Err(MsError::InvalidConfig("perplexity needs a nonempty corpus".into()));
    }
    let data = &corpus[..corpus.len().min(ppl_tokens)];
    let mut out = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let n = len.min(data.len());
        if n < 2 {
            return Err(MsError::InvalidConfig(format!(
                "context {len} leaves {n} tokens, need at least 2"
            )));
        }
        let wcfg = fit_for(cfg, n)?;
        let windows = data.len() / n;
        let tokens = Array2::from_shape_fn((windows, n), |(w, t)| data[w * n + t]);
        let logits = match route {
            Route::Sparse => forward(&wcfg, params, &tokens, enc, None)?.0,
            Route::Dense => forward_dense(&wcfg, params, &tokens, enc)?,
        };
        let (ce, _) = cross_entropy_next(&logits, &tokens)?;
        out.push((len, ce.exp()));
    }
    Ok(out)
}

/// The model forward with every attention replaced by the quadratic dense
/// reference; projections, norms, and the MLP are shared with the sparse
/// path.
fn forward_dense<F: Real>(
    cfg: &ModelConfig,
    params: &Params<F>,
    tokens: &Array2<usize>,
    enc: &PosEncoding,
) -> Result<Array3<F>> {
    let (b, n) = tokens.dim();
    if n == 0 || n > cfg.max_seq {
        return Err(MsError::InvalidConfig(format!(
            "sequence length {} outside 1..={}",
            n, cfg.max_seq
        )));
    }
    let ids = iota_ids(b, n);
    let flat: Vec<usize> = tokens.iter().copied().collect();
    let mut x = embed_lookup(&params.embed, &flat)?;
    for blk in &params.blocks {
        let (h1, _) = rmsnorm(&x, &blk.norm1)?;
        let q = to_heads(&linear(&h1, &blk.wq.eff())?, b, cfg.heads, n, cfg.d_head);
        let k = to_heads(&linear(&h1, &blk.wk.eff())?, b, cfg.heads, n, cfg.d_head);
        let v = to_heads(&linear(&h1, &blk.wv.eff())?, b, cfg.heads, n, cfg.d_head);
        let att = dense_causal_oracle(&q, &k, &v, &ids, enc)?;
        let o = linear(&from_heads(&att), &blk.wo.eff())?;
        x += &o;
        let (h2, _) = rmsnorm(&x, &blk.norm2)?;
        let mlp = linear(&gelu(&linear(&h2, &blk.up)?), &blk.down)?;
        x += &mlp;
    }
    let (xf, _) = rmsnorm(&x, &params.final_norm)?;
    let logits2 = linear(&xf, &params.head)?;
    Ok(Array3::from_shape_fn((b, n, cfg.vocab), |(bi, t, v)| {
        logits2[[bi * n + t, v]]
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PasskeyOutcome {
    pub len: usize,
    /// Fraction of trials whose full key decoded exactly; `None` when the
    /// length was over budget and skipped.
    pub acc: Option<f64>,
}

/// Greedy-decodes the key at each context length. Lengths above
/// `max_context` are not attempted; the outcome records the skip so the
/// caller can warn.
#[allow(clippy::too_many_arguments)]
pub fn eval_passkey<F: Real>(
    cfg: &ModelConfig,
    params: &Params<F>,
    enc: &PosEncoding,
    lengths: &[usize],
    trials: usize,
    key_len: usize,
    pos: Option<f64>,
    max_context: usize,
    seed: u64,
) -> Result<Vec<PasskeyOutcome>> {
    if trials == 0 {
        return Err(MsError::InvalidConfig("passkey needs at least one trial".into()));
    }
    let mut out = Vec::with_capacity(lengths.len());
    for &len in lengths {
        if len > max_context {
            out.push(PasskeyOutcome { len, acc: None });
            continue;
        }
        let wcfg = fit_for(cfg, len)?;
        let spec = PasskeySpec {
            len,
            key_len,
            pos,
            filler_zipf: 1.1,
        };
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (len as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut hits = 0usize;
        for _ in 0..trials {
            let pk = gen_passkey(&spec, wcfg.vocab, &mut rng)?;
            let mut toks = pk.tokens[..pk.prompt_end].to_vec();
            for _ in 0..key_len {
                let batch = Array2::from_shape_fn((1, toks.len()), |(_, t)| toks[t]);
                let (logits, _) = forward(&wcfg, params, &batch, enc, None)?;
                toks.push(argmax(&logits, toks.len() - 1));
            }
            if toks[pk.prompt_end..] == pk.key[..] {
                hits += 1;
            }
        }
        out.push(PasskeyOutcome {
            len,
            acc: Some(hits as f64 / trials as f64),
        });
    }
    Ok(out)
}

fn argmax<F: Real>(logits: &Array3<F>, t: usize) -> usize {
    let row = logits.slice(ndarray::s![0, t, ..]);
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
pub struct BenchRow {
    pub n: usize,
    pub predicted: FlopAccount,
    pub measured: AttnStats,
    pub dense_mas: u64,
    pub wall_ms: f64,
}

impl BenchRow {
    /// Closed form and instrumented counters must agree exactly.
    pub fn counts_match(&self) -> bool {
        self.predicted.selection_mas == self.measured.selection_mas
            && self.predicted.attention_mas == self.measured.attention_mas
            && self.predicted.gathered_elems == self.measured.gathered_elems
    }
}

/// Runs the sparse kernel on random tensors at each length (batch 1, one
/// head) and pairs the instrumented counters with the closed-form account
/// and the dense quadratic cost.
pub fn bench_attention(
    lengths: &[usize],
    d: usize,
    attn: &MsConfig,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if d == 0 || d % 2 != 0 {
        return Err(MsError::InvalidConfig(format!(
            "bench head dim must be even and nonzero, got {d}"
        )));
    }
    let enc = PosEncoding::rope(d);
    let mut rows = Vec::with_capacity(lengths.len());
    for &n in lengths {
        let predicted = flop_account(n, d, attn)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        let mut tensor = || {
            Array4::from_shape_fn((1, 1, n, d), |_| {
                0.1 * rng.sample::<f32, _>(StandardNormal)
            })
        };
        let (q, k, v) = (tensor(), tensor(), tensor());
        let ids = iota_ids(1, n);
        let t0 = Instant::now();
        let ms = ms_attention(&q, &k, &v, &ids, attn, &enc)?;
        rows.push(BenchRow {
            n,
            predicted,
            measured: ms.stats,
            dense_mas: dense_mas(1, 1, n, d),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(rows)
}
