//! Toy decoder-only transformer around merge-select attention.
//!
//! Pre-norm blocks: x += Wo·attn(norm(x)); x += down·gelu(up·norm(x));
//! untied head after a final norm. Gradients are hand-written reverse
//! passes over the same primitives; routing indices are constants on the
//! way back, so training sees a straight-through hard top-k.

mod checkpoint;
mod layers;
mod lora;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{
    embed_backward, embed_lookup, gelu, gelu_backward, linear, linear_backward, rmsnorm,
    rmsnorm_backward, RmsNormCache,
};
pub use lora::{LoraAdapter, LoraVariant, Proj, TrainScope, ALL_PROJS};
pub use optim::{global_grad_norm, AdamW, OptimConfig};
pub use train::{train, TrainLog, TrainOpts, TrainState};

use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    iota_ids, ms_attention, ms_attention_backward, ms_attention_pinned, AttnCache, AttnStats,
    MsConfig, RoutePlan,
};
use crate::error::{MsError, Result};
use crate::num::Real;
use crate::positional::PosEncoding;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub attn: MsConfig,
    pub pos: PosEncoding,
    #[serde(default)]
    pub optim: OptimConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 32,
            d_head: 16,
            vocab: 512,
            max_seq: 512,
            attn: MsConfig::default(),
            pos: PosEncoding::rope(16),
            optim: OptimConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.heads * self.d_head {
            return Err(MsError::InvalidConfig(format!(
                "d_model {} != heads {} * d_head {}",
                self.d_model, self.heads, self.d_head
            )));
        }
        if self.vocab < 2 {
            return Err(MsError::InvalidConfig("vocab must be at least 2".into()));
        }
        if self.layers == 0 || self.max_seq == 0 {
            return Err(MsError::InvalidConfig("layers and max_seq must be positive".into()));
        }
        if self.pos.d != self.d_head {
            return Err(MsError::InvalidConfig(format!(
                "positional dim {} != d_head {}",
                self.pos.d, self.d_head
            )));
        }
        self.attn.validate(self.max_seq)?;
        self.pos.validate()?;
        self.optim.validate()
    }
}

/// A projection with an optional low-rank adapter riding on it.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearP<F> {
    pub w: Array2<F>,
    pub lora: Option<LoraAdapter<F>>,
}

impl<F: Real> LinearP<F> {
    fn plain(w: Array2<F>) -> Self {
        LinearP { w, lora: None }
    }

    /// Effective weight W₀ + A·B (or W₀ alone).
    pub fn eff(&self) -> Array2<F> {
        match &self.lora {
            Some(ad) => ad.apply(&self.w),
            None => self.w.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<F> {
    pub norm1: Array1<F>,
    pub wq: LinearP<F>,
    pub wk: LinearP<F>,
    pub wv: LinearP<F>,
    pub wo: LinearP<F>,
    pub norm2: Array1<F>,
    pub up: Array2<F>,
    pub down: Array2<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<F> {
    pub embed: Array2<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub final_norm: Array1<F>,
    pub head: Array2<F>,
}

impl<F: Real> Params<F> {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let mut draw = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| F::from_f64(normal.sample(rng)))
        };
        let dm = cfg.d_model;
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams {
                norm1: Array1::ones(dm),
                wq: LinearP::plain(draw(dm, dm)),
                wk: LinearP::plain(draw(dm, dm)),
                wv: LinearP::plain(draw(dm, dm)),
                wo: LinearP::plain(draw(dm, dm)),
                norm2: Array1::ones(dm),
                up: draw(dm, 4 * dm),
                down: draw(4 * dm, dm),
            })
            .collect();
        Ok(Params {
            embed: draw(cfg.vocab, dm),
            blocks,
            final_norm: Array1::ones(dm),
            head: draw(dm, cfg.vocab),
        })
    }

    /// Adapters on the variant's projections in every block; B zero so the
    /// model is unchanged until the first update.
    pub fn attach_adapters<R: Rng>(
        &mut self,
        variant: LoraVariant,
        rank: usize,
        rng: &mut R,
    ) -> Result<()> {
        let dm = self.embed.ncols();
        for blk in &mut self.blocks {
            for proj in variant.targets() {
                let slot = match proj {
                    Proj::Q => &mut blk.wq,
                    Proj::K => &mut blk.wk,
                    Proj::V => &mut blk.wv,
                    Proj::O => &mut blk.wo,
                };
                slot.lora = Some(LoraAdapter::init(dm, dm, rank, rng)?);
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let zero2 = |a: &Array2<F>| Array2::zeros(a.dim());
        let zerol = |l: &LinearP<F>| LinearP {
            w: zero2(&l.w),
            lora: l.lora.as_ref().map(|ad| LoraAdapter {
                a: zero2(&ad.a),
                b: zero2(&ad.b),
            }),
        };
        Params {
            embed: zero2(&self.embed),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    norm1: Array1::zeros(b.norm1.len()),
                    wq: zerol(&b.wq),
                    wk: zerol(&b.wk),
                    wv: zerol(&b.wv),
                    wo: zerol(&b.wo),
                    norm2: Array1::zeros(b.norm2.len()),
                    up: zero2(&b.up),
                    down: zero2(&b.down),
                })
                .collect(),
            final_norm: Array1::zeros(self.final_norm.len()),
            head: zero2(&self.head),
        }
    }

    /// Named views over every tensor, adapters included, in a fixed order
    /// shared by the optimizer, checkpoints, and gradient checks.
    pub fn flatten(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out: Vec<(String, ArrayViewD<'_, F>)> = Vec::new();
        out.push(("embed".into(), self.embed.view().into_dyn()));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.norm1.g"), b.norm1.view().into_dyn()));
            for (tag, l) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo)] {
                let name = format!("block{i}.attn.{tag}");
                out.push((name.clone(), l.w.view().into_dyn()));
                if let Some(ad) = &l.lora {
                    out.push((format!("{name}.lora.a"), ad.a.view().into_dyn()));
                    out.push((format!("{name}.lora.b"), ad.b.view().into_dyn()));
                }
            }
            out.push((format!("block{i}.norm2.g"), b.norm2.view().into_dyn()));
            out.push((format!("block{i}.mlp.up"), b.up.view().into_dyn()));
            out.push((format!("block{i}.mlp.down"), b.down.view().into_dyn()));
        }
        out.push(("final_norm.g".into(), self.final_norm.view().into_dyn()));
        out.push(("head".into(), self.head.view().into_dyn()));
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, F>)> = Vec::new();
        let Params {
            embed,
            blocks,
            final_norm,
            head,
        } = self;
        out.push(("embed".into(), embed.view_mut().into_dyn()));
        for (i, b) in blocks.iter_mut().enumerate() {
            let BlockParams {
                norm1,
                wq,
                wk,
                wv,
                wo,
                norm2,
                up,
                down,
            } = b;
            out.push((format!("block{i}.norm1.g"), norm1.view_mut().into_dyn()));
            for (tag, l) in [("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)] {
                let name = format!("block{i}.attn.{tag}");
                let LinearP { w, lora } = l;
                out.push((name.clone(), w.view_mut().into_dyn()));
                if let Some(ad) = lora {
                    out.push((format!("{name}.lora.a"), ad.a.view_mut().into_dyn()));
                    out.push((format!("{name}.lora.b"), ad.b.view_mut().into_dyn()));
                }
            }
            out.push((format!("block{i}.norm2.g"), norm2.view_mut().into_dyn()));
            out.push((format!("block{i}.mlp.up"), up.view_mut().into_dyn()));
            out.push((format!("block{i}.mlp.down"), down.view_mut().into_dyn()));
        }
        out.push(("final_norm.g".into(), final_norm.view_mut().into_dyn()));
        out.push(("head".into(), head.view_mut().into_dyn()));
        out
    }
}

pub struct BlockCache<F> {
    n1: RmsNormCache<F>,
    h1: Array2<F>,
    attn: AttnCache<F>,
    pub plan: RoutePlan,
    concat: Array2<F>,
    n2: RmsNormCache<F>,
    h2: Array2<F>,
    up_pre: Array2<F>,
    up_act: Array2<F>,
}

pub struct ForwardCache<F> {
    pub tokens: Array2<usize>,
    pub ids: Array2<i64>,
    pub enc: PosEncoding,
    pub blocks: Vec<BlockCache<F>>,
    fnorm: RmsNormCache<F>,
    xf: Array2<F>,
    pub stats: AttnStats,
}

pub(crate) fn to_heads<F: Real>(
    x: &Array2<F>,
    b: usize,
    heads: usize,
    n: usize,
    d: usize,
) -> Array4<F> {
    Array4::from_shape_fn((b, heads, n, d), |(bi, hi, t, c)| {
        x[[bi * n + t, hi * d + c]]
    })
}

pub(crate) fn from_heads<F: Real>(x: &Array4<F>) -> Array2<F> {
    let (b, heads, n, d) = x.dim();
    Array2::from_shape_fn((b * n, heads * d), |(row, col)| {
        x[[row / n, col / d, row % n, col % d]]
    })
}

/// Next-token logits for a token batch. `enc` is the encoding to rotate
/// with (train advances its scale over time); `pins` fixes per-layer
/// routing when given.
pub fn forward<F: Real>(
    cfg: &ModelConfig,
    params: &Params<F>,
    tokens: &Array2<usize>,
    enc: &PosEncoding,
    pins: Option<&[RoutePlan]>,
) -> Result<(Array3<F>, ForwardCache<F>)> {
    let (b, n) = tokens.dim();
    if n == 0 || n > cfg.max_seq {
        return Err(MsError::InvalidConfig(format!(
            "sequence length {} outside 1..={}",
            n, cfg.max_seq
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(MsError::InvalidConfig(format!(
            "token id {t} outside vocab {}",
            cfg.vocab
        )));
    }
    if let Some(p) = pins {
        if p.len() != cfg.layers {
            return Err(MsError::ShapeMismatch(format!(
                "{} pinned plans for {} layers",
                p.len(),
                cfg.layers
            )));
        }
    }
    let ids = iota_ids(b, n);
    let flat: Vec<usize> = tokens.iter().copied().collect();
    let mut x = embed_lookup(&params.embed, &flat)?;
    let mut stats = AttnStats::default();
    let mut blocks = Vec::with_capacity(cfg.layers);
    for (li, blk) in params.blocks.iter().enumerate() {
        let (h1, n1) = rmsnorm(&x, &blk.norm1)?;
        let q = linear(&h1, &blk.wq.eff())?;
        let k = linear(&h1, &blk.wk.eff())?;
        let v = linear(&h1, &blk.wv.eff())?;
        let q4 = to_heads(&q, b, cfg.heads, n, cfg.d_head);
        let k4 = to_heads(&k, b, cfg.heads, n, cfg.d_head);
        let v4 = to_heads(&v, b, cfg.heads, n, cfg.d_head);
        let ms = match pins {
            Some(plans) => {
                ms_attention_pinned(&q4, &k4, &v4, &ids, &cfg.attn, enc, &plans[li])?
            }
            None => ms_attention(&q4, &k4, &v4, &ids, &cfg.attn, enc)?,
        };
        stats.absorb(ms.stats);
        let concat = from_heads(&ms.out);
        let o = linear(&concat, &blk.wo.eff())?;
        x += &o;
        let (h2, n2) = rmsnorm(&x, &blk.norm2)?;
        let up_pre = linear(&h2, &blk.up)?;
        let up_act = gelu(&up_pre);
        let mlp = linear(&up_act, &blk.down)?;
        x += &mlp;
        blocks.push(BlockCache {
            n1,
            h1,
            attn: ms.cache,
            plan: ms.plan,
            concat,
            n2,
            h2,
            up_pre,
            up_act,
        });
    }
    let (xf, fnorm) = rmsnorm(&x, &params.final_norm)?;
    let logits2 = linear(&xf, &params.head)?;
    let logits = Array3::from_shape_fn((b, n, cfg.vocab), |(bi, t, v)| {
        logits2[[bi * n + t, v]]
    });
    Ok((
        logits,
        ForwardCache {
            tokens: tokens.clone(),
            ids,
            enc: enc.clone(),
            blocks,
            fnorm,
            xf,
            stats,
        },
    ))
}

/// Reverse pass from logit gradients. Frozen base weights (per `scope`)
/// are skipped entirely: their gradient slots stay exactly zero. Adapter
/// gradients are always produced where adapters exist.
pub fn backward<F: Real>(
    cfg: &ModelConfig,
    params: &Params<F>,
    d_logits: &Array3<F>,
    cache: &ForwardCache<F>,
    scope: TrainScope,
) -> Result<Params<F>> {
    let (b, n) = cache.tokens.dim();
    if d_logits.dim() != (b, n, cfg.vocab) {
        return Err(MsError::ShapeMismatch(format!(
            "d_logits {:?} vs ({}, {}, {})",
            d_logits.dim(),
            b,
            n,
            cfg.vocab
        )));
    }
    let mut grads = params.zeros_like();
    let dl2 = Array2::from_shape_fn((b * n, cfg.vocab), |(row, v)| {
        d_logits[[row / n, row % n, v]]
    });
    let (d_xf, d_head) = linear_backward(&dl2, &cache.xf, &params.head);
    if scope.trainable("head") {
        grads.head += &d_head;
    }
    let (mut dx, d_gf) = rmsnorm_backward(&d_xf, &params.final_norm, &cache.fnorm);
    if scope.trainable("final_norm.g") {
        grads.final_norm += &d_gf;
    }
    for (li, blk) in params.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[li];
        let gb = &mut grads.blocks[li];
        let base = format!("block{li}");

        // MLP branch; dx carries the residual stream gradient.
        let (d_act, d_down) = linear_backward(&dx, &bc.up_act, &blk.down);
        let d_up_pre = gelu_backward(&d_act, &bc.up_pre);
        let (d_h2, d_up) = linear_backward(&d_up_pre, &bc.h2, &blk.up);
        if scope.trainable(&format!("{base}.mlp.down")) {
            gb.down += &d_down;
        }
        if scope.trainable(&format!("{base}.mlp.up")) {
            gb.up += &d_up;
        }
        let (d_x2, d_g2) = rmsnorm_backward(&d_h2, &blk.norm2, &bc.n2);
        if scope.trainable(&format!("{base}.norm2.g")) {
            gb.norm2 += &d_g2;
        }
        dx += &d_x2;

        // Attention branch.
        let (d_concat, d_wo_eff) = linear_backward(&dx, &bc.concat, &blk.wo.eff());
        route_linear_grad(&mut gb.wo, &blk.wo, d_wo_eff, scope, &format!("{base}.attn.wo"));
        let d_attn4 = to_heads(&d_concat, b, cfg.heads, n, cfg.d_head);
        let (dq4, dk4, dv4) =
            ms_attention_backward(&d_attn4, &cache.ids, &cfg.attn, &cache.enc, &bc.attn)?;
        let dq = from_heads(&dq4);
        let dk = from_heads(&dk4);
        let dv = from_heads(&dv4);
        let (d_h1_q, d_wq_eff) = linear_backward(&dq, &bc.h1, &blk.wq.eff());
        let (d_h1_k, d_wk_eff) = linear_backward(&dk, &bc.h1, &blk.wk.eff());
        let (d_h1_v, d_wv_eff) = linear_backward(&dv, &bc.h1, &blk.wv.eff());
        route_linear_grad(&mut gb.wq, &blk.wq, d_wq_eff, scope, &format!("{base}.attn.wq"));
        route_linear_grad(&mut gb.wk, &blk.wk, d_wk_eff, scope, &format!("{base}.attn.wk"));
        route_linear_grad(&mut gb.wv, &blk.wv, d_wv_eff, scope, &format!("{base}.attn.wv"));
        let d_h1 = d_h1_q + &d_h1_k + &d_h1_v;
        let (d_x1, d_g1) = rmsnorm_backward(&d_h1, &blk.norm1, &bc.n1);
        if scope.trainable(&format!("{base}.norm1.g")) {
            gb.norm1 += &d_g1;
        }
        dx += &d_x1;
    }
    let flat: Vec<usize> = cache.tokens.iter().copied().collect();
    if scope.trainable("embed") {
        embed_backward(&mut grads.embed, &dx, &flat);
    }
    Ok(grads)
}

/// Sends the effective-weight gradient to the base slot (when trainable)
/// and to the adapter factors (whenever present).
fn route_linear_grad<F: Real>(
    grad: &mut LinearP<F>,
    param: &LinearP<F>,
    d_eff: Array2<F>,
    scope: TrainScope,
    name: &str,
) {
    if let (Some(gad), Some(pad)) = (&mut grad.lora, &param.lora) {
        let (da, db) = pad.grads(&d_eff);
        gad.a += &da;
        gad.b += &db;
    }
    if scope.trainable(name) {
        grad.w += &d_eff;
    }
}

/// Mean next-token cross-entropy and its logit gradient. Position t is
/// scored against token t+1; the last position predicts nothing.
pub fn cross_entropy_next<F: Real>(
    logits: &Array3<F>,
    tokens: &Array2<usize>,
) -> Result<(f64, Array3<F>)> {
    let (b, n, vocab) = logits.dim();
    if tokens.dim() != (b, n) {
        return Err(MsError::ShapeMismatch(format!(
            "tokens {:?} vs logits {:?}",
            tokens.dim(),
            logits.dim()
        )));
    }
    let mut d = Array3::zeros((b, n, vocab));
    if n < 2 {
        return Ok((0.0, d));
    }
    let count = (b * (n - 1)) as f64;
    let mut loss = 0.0f64;
    for bi in 0..b {
        for t in 0..n - 1 {
            let target = tokens[[bi, t + 1]];
            if target >= vocab {
                return Err(MsError::InvalidConfig(format!(
                    "target id {target} outside vocab {vocab}"
                )));
            }
            let row: Vec<f64> = (0..vocab).map(|v| logits[[bi, t, v]].into_f64()).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|l| (l - max).exp()).sum();
            loss += max + z.ln() - row[target];
            for v in 0..vocab {
                let p = (row[v] - max).exp() / z;
                let delta = if v == target { 1.0 } else { 0.0 };
                d[[bi, t, v]] = F::from_f64((p - delta) / count);
            }
        }
    }
    Ok((loss / count, d))
}

/// Forward, loss, and gradients in one call.
pub fn loss_and_grad<F: Real>(
    cfg: &ModelConfig,
    params: &Params<F>,
    tokens: &Array2<usize>,
    enc: &PosEncoding,
    scope: TrainScope,
    pins: Option<&[RoutePlan]>,
) -> Result<(f64, Params<F>, ForwardCache<F>)> {
    let (logits, cache) = forward(cfg, params, tokens, enc, pins)?;
    let (loss, d_logits) = cross_entropy_next(&logits, tokens)?;
    let grads = backward(cfg, params, &d_logits, &cache, scope)?;
    Ok((loss, grads, cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 1,
            d_model: 8,
            d_head: 8,
            vocab: 16,
            max_seq: 32,
            attn: MsConfig {
                s_q: 4,
                s_k: 4,
                topk: 4,
                merges: 1,
                topn: 4,
                force_local: true,
                permute: false,
                ..MsConfig::default()
            },
            pos: PosEncoding::rope(8),
            optim: OptimConfig::default(),
        }
    }

    #[test]
    fn flatten_names_are_stable_and_disjoint() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Params::<f32>::init(&cfg, &mut rng).unwrap();
        p.attach_adapters(LoraVariant::Ko, 2, &mut rng).unwrap();
        let names: Vec<String> = p.flatten().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"block0.attn.wk.lora.a".to_string()));
        assert!(!names.contains(&"block0.attn.wq.lora.a".to_string()));
        let mut_names: Vec<String> = p.flatten_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, mut_names);
    }

    #[test]
    fn out_of_vocab_token_rejected() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Params::<f32>::init(&cfg, &mut rng).unwrap();
        let tokens = Array2::from_shape_vec((1, 4), vec![1usize, 2, 99, 3]).unwrap();
        assert!(forward(&cfg, &p, &tokens, &cfg.pos, None).is_err());
    }

    #[test]
    fn single_token_logits_use_only_that_row() {
        let mut cfg = tiny_cfg();
        cfg.attn = MsConfig {
            s_q: 1,
            s_k: 1,
            topk: 1,
            merges: 1,
            topn: 1,
            ..cfg.attn
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Params::<f32>::init(&cfg, &mut rng).unwrap();
        let tokens = Array2::from_shape_vec((1, 1), vec![3usize]).unwrap();
        let (logits, _) = forward(&cfg, &p, &tokens, &cfg.pos, None).unwrap();
        let mut p2 = p.clone();
        for t in 0..cfg.vocab {
            if t != 3 {
                p2.embed.row_mut(t).fill(9.0);
            }
        }
        let (logits2, _) = forward(&cfg, &p2, &tokens, &cfg.pos, None).unwrap();
        assert_eq!(logits, logits2);
    }

    #[test]
    fn zero_upstream_gradient_zeroes_everything() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Params::<f32>::init(&cfg, &mut rng).unwrap();
        let tokens = Array2::from_shape_vec((1, 16), (0..16usize).collect()).unwrap();
        let (_, cache) = forward(&cfg, &p, &tokens, &cfg.pos, None).unwrap();
        let d = Array3::zeros((1, 16, cfg.vocab));
        let grads = backward(&cfg, &p, &d, &cache, TrainScope::Full).unwrap();
        for (name, view) in grads.flatten() {
            assert!(view.iter().all(|&v| v == 0.0), "{name} not zero");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Array3::<f64>::zeros((1, 3, 4));
        let tokens = Array2::from_shape_vec((1, 3), vec![0usize, 1, 2]).unwrap();
        let (loss, d) = cross_entropy_next(&logits, &tokens).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
        // Two scored positions, grad rows sum to zero.
        assert!(d.index_axis(ndarray::Axis(0), 0).row(0).sum().abs() < 1e-12);
        assert_eq!(d[[0, 2, 0]], 0.0);
    }
}
