//! Next-token training over a token stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::lora::TrainScope;
use super::optim::{global_grad_norm, AdamW};
use super::{loss_and_grad, ModelConfig, Params};
use crate::error::{MsError, Result};
use crate::num::Real;
use crate::positional::{growth_schedule, sample_randomp, PosEncoding, PosKind};

/// Everything a run needs to continue: parameters, moments, position in
/// the schedule, and the RNG.
pub struct TrainState<F> {
    pub cfg: ModelConfig,
    pub scope: TrainScope,
    pub lora_rank: Option<usize>,
    pub params: Params<F>,
    pub opt: AdamW<F>,
    pub tokens_seen: u64,
    pub seed: u64,
    pub rng: ChaCha8Rng,
}

impl<F: Real> TrainState<F> {
    pub fn new(
        cfg: ModelConfig,
        scope: TrainScope,
        lora_rank: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::init(&cfg, &mut rng)?;
        if let TrainScope::Finetune(variant) = scope {
            let rank = lora_rank.ok_or_else(|| {
                MsError::InvalidConfig("finetune scope needs a lora rank".into())
            })?;
            params.attach_adapters(variant, rank, &mut rng)?;
        }
        let opt = AdamW::new(&params);
        Ok(TrainState {
            cfg,
            scope,
            lora_rank,
            params,
            opt,
            tokens_seen: 0,
            seed,
            rng,
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Encoding for the current schedule position. Growth (when configured)
    /// rescales by tokens seen; crd offsets are drawn fresh per call when
    /// `sample_offset` is set, so training visits the whole reduced range.
    pub fn encoding_now(&mut self, sample_offset: bool) -> Result<PosEncoding> {
        let mut enc = self.cfg.pos.clone();
        if let Some(g) = &enc.growth {
            enc = enc.with_scale(growth_schedule(self.tokens_seen, g)?);
        }
        if sample_offset && enc.kind == PosKind::CrdNtk {
            enc.randomp = sample_randomp(&mut self.rng, enc.max);
        }
        Ok(enc)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOpts {
    pub steps: u64,
    pub seq_len: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// ntk scale in effect at each step.
    pub scales: Vec<f64>,
}

/// Runs `opts.steps` updates, slicing fixed-length windows from the corpus
/// round-robin. Aborts with a diagnostic on a non-finite loss.
pub fn train<F: Real>(
    state: &mut TrainState<F>,
    corpus: &[usize],
    opts: &TrainOpts,
) -> Result<TrainLog> {
    let n = opts.seq_len;
    let batch = opts.batch.max(1);
    if n < 2 || n > state.cfg.max_seq {
        return Err(MsError::InvalidConfig(format!(
            "seq_len {} outside 2..={}",
            n, state.cfg.max_seq
        )));
    }
    if corpus.len() < n {
        return Err(MsError::InvalidConfig(format!(
            "corpus of {} tokens shorter than window {}",
            corpus.len(),
            n
        )));
    }
    let span = corpus.len() - n + 1;
    let mut log = TrainLog::default();
    for s in 0..opts.steps {
        let step_idx = state.opt.step;
        let mut tokens = ndarray::Array2::zeros((batch, n));
        for bi in 0..batch {
            let start = ((step_idx * batch as u64 + bi as u64) * n as u64 % span as u64) as usize;
            for t in 0..n {
                tokens[[bi, t]] = corpus[start + t];
            }
        }
        let enc = state.encoding_now(true)?;
        let (loss, grads, _) = loss_and_grad(
            &state.cfg,
            &state.params,
            &tokens,
            &enc,
            state.scope,
            None,
        )?;
        let gn = global_grad_norm(&grads, state.scope);
        if !loss.is_finite() || !gn.is_finite() {
            return Err(MsError::NonFinite(format!(
                "training diverged at step {} (loss {loss}, lr {}, grad norm {gn})",
                step_idx, state.cfg.optim.lr
            )));
        }
        let clip = state.cfg.optim.clip_norm;
        let scale = if clip > 0.0 && gn > clip { clip / gn } else { 1.0 };
        state
            .opt
            .step(&mut state.params, &grads, &state.cfg.optim, state.scope, scale)?;
        state.tokens_seen += (batch * n) as u64;
        log.losses.push(loss);
        log.grad_norms.push(gn);
        log.scales.push(enc.ntk_scale);
        let _ = s;
    }
    Ok(log)
}
