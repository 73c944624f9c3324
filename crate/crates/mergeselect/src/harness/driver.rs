//! Orchestration behind the CLI subcommands.
//!
//! Each `run_*` takes a validated [`RunConfig`], does the work, appends
//! result records, and returns what it computed so both the binary and the
//! test suite drive the exact same flows.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{MsError, Result};
use crate::model::{
    load_checkpoint, save_checkpoint, train, AdamW, TrainOpts, TrainScope, TrainState,
};
use crate::positional::PosEncoding;

use super::config::{CorpusKind, RunConfig, ScopeKind};
use super::corpus::{load_utf8, mixture_corpus, zipf_corpus};
use super::eval::{bench_attention, eval_passkey, eval_ppl, BenchRow, PasskeyOutcome};
use super::records::{RecordSink, ResultRecord};

/// Corpus named by the train section. Synthetic kinds take the seed given
/// here, so training and evaluation can draw disjoint streams; file corpora
/// ignore it.
pub fn build_corpus(cfg: &RunConfig, seed: u64) -> Result<Vec<usize>> {
    let t = &cfg.train;
    match t.corpus {
        CorpusKind::Zipf => zipf_corpus(cfg.model.vocab, t.corpus_tokens, seed),
        CorpusKind::Mixture => mixture_corpus(cfg.model.vocab, t.corpus_tokens, t.key_len, seed),
        CorpusKind::File => {
            let path = t.corpus_path.as_ref().ok_or_else(|| {
                MsError::InvalidConfig("corpus = \"file\" needs corpus_path".into())
            })?;
            load_utf8(path, cfg.model.vocab)
        }
    }
}

fn record(sink: &RecordSink, cfg: &RunConfig, metric: &str, n: usize, value: f64, wall_ms: f64) -> Result<()> {
    sink.append(&ResultRecord {
        run_id: cfg.run_id(),
        config_hash: cfg.config_hash(),
        metric: metric.into(),
        context_len: n,
        value,
        wall_ms,
    })
}

pub struct TrainSummary {
    pub first_loss: f64,
    pub final_loss: f64,
    pub steps: u64,
    pub tokens_seen: u64,
    pub checkpoint: PathBuf,
}

/// Trains per the config and checkpoints into the output directory.
///
/// With `resume` set and a checkpoint present, training continues from it.
/// A scope change on resume converts the run: switching to finetune
/// attaches fresh adapters and restarts the optimizer with only the
/// adapter/embedding/norm set trainable, which is the pretrain-then-adapt
/// workflow.
pub fn run_train(cfg: &RunConfig, sink: &RecordSink) -> Result<TrainSummary> {
    let t0 = Instant::now();
    let t = &cfg.train;
    let ckpt = cfg.checkpoint_dir();
    let want_scope = t.train_scope()?;
    let mut state = if t.resume && ckpt.join("manifest.json").exists() {
        let mut st = load_checkpoint(&ckpt)?;
        if st.scope != want_scope {
            if let TrainScope::Finetune(variant) = want_scope {
                st.params.attach_adapters(variant, t.lora_rank, &mut st.rng)?;
                st.lora_rank = Some(t.lora_rank);
            }
            st.scope = want_scope;
            st.opt = AdamW::new(&st.params);
        }
        st
    } else {
        let rank = match t.scope {
            ScopeKind::Finetune => Some(t.lora_rank),
            ScopeKind::Full => None,
        };
        TrainState::new(cfg.model.clone(), want_scope, rank, cfg.seed)?
    };
    let corpus = build_corpus(cfg, cfg.seed)?;
    let opts = TrainOpts {
        steps: t.steps,
        seq_len: t.seq_len,
        batch: t.batch,
    };
    let first_step = state.step();
    let log = train(&mut state, &corpus, &opts)?;
    save_checkpoint(&ckpt, &state)?;
    write_curve(&cfg.out_dir.join("train_curve.csv"), first_step, &log)?;
    let wall = t0.elapsed().as_secs_f64() * 1e3;
    let final_loss = *log.losses.last().expect("steps >= 1");
    record(sink, cfg, "train_loss_final", t.seq_len, final_loss, wall)?;
    record(sink, cfg, "train_tokens", t.seq_len, state.tokens_seen as f64, wall)?;
    Ok(TrainSummary {
        first_loss: log.losses[0],
        final_loss,
        steps: t.steps,
        tokens_seen: state.tokens_seen,
        checkpoint: ckpt,
    })
}

fn write_curve(path: &Path, first_step: u64, log: &crate::model::TrainLog) -> Result<()> {
    let mut text = String::from("step,loss,grad_norm,ntk_scale\n");
    for (i, ((l, g), s)) in log
        .losses
        .iter()
        .zip(&log.grad_norms)
        .zip(&log.scales)
        .enumerate()
    {
        text.push_str(&format!("{},{l},{g},{s}\n", first_step + i as u64));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads the checkpoint the eval subcommands operate on.
pub fn load_state(cfg: &RunConfig, ckpt_override: Option<&Path>) -> Result<TrainState<f32>> {
    let dir = ckpt_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.checkpoint_dir());
    if !dir.join("manifest.json").exists() {
        return Err(MsError::InvalidConfig(format!(
            "no checkpoint at {}; run train first",
            dir.display()
        )));
    }
    load_checkpoint(&dir)
}

/// Encoding a checkpoint evaluates under: the growth schedule is frozen at
/// the tokens seen so far, then any inference-time scale override replaces
/// the ntk scale.
pub fn eval_encoding(state: &mut TrainState<f32>, scale: Option<f64>) -> Result<PosEncoding> {
    let mut enc = state.encoding_now(false)?;
    if let Some(s) = scale {
        enc = enc.with_scale(s);
    }
    Ok(enc)
}

pub fn run_eval_ppl(
    cfg: &RunConfig,
    sink: &RecordSink,
    ckpt: Option<&Path>,
) -> Result<Vec<(usize, f64)>> {
    let t0 = Instant::now();
    let mut state = load_state(cfg, ckpt)?;
    let enc = eval_encoding(&mut state, cfg.eval.scale_override)?;
    let corpus = build_corpus(cfg, cfg.seed + 1)?;
    let got = eval_ppl(
        &state.cfg,
        &state.params,
        &enc,
        &corpus,
        &cfg.eval.context_lengths,
        cfg.eval.ppl_tokens,
    )?;
    let wall = t0.elapsed().as_secs_f64() * 1e3;
    for &(n, ppl) in &got {
        record(sink, cfg, "ppl", n, ppl, wall)?;
    }
    Ok(got)
}

pub fn run_eval_passkey(
    cfg: &RunConfig,
    sink: &RecordSink,
    ckpt: Option<&Path>,
) -> Result<Vec<PasskeyOutcome>> {
    let t0 = Instant::now();
    let mut state = load_state(cfg, ckpt)?;
    let enc = eval_encoding(&mut state, cfg.eval.scale_override)?;
    let e = &cfg.eval;
    let got = eval_passkey(
        &state.cfg,
        &state.params,
        &enc,
        &e.context_lengths,
        e.passkey_trials,
        e.passkey_key_len,
        e.passkey_pos,
        e.max_context,
        cfg.seed + 2,
    )?;
    let wall = t0.elapsed().as_secs_f64() * 1e3;
    for o in &got {
        match o.acc {
            Some(acc) => record(sink, cfg, "passkey_acc", o.len, acc, wall)?,
            None => record(sink, cfg, "passkey_skipped", o.len, -1.0, wall)?,
        }
    }
    Ok(got)
}

/// Bench rows plus whether every instrumented counter matched its closed
/// form; a `false` here is an invariant violation the caller must surface.
pub fn run_bench(cfg: &RunConfig, sink: &RecordSink) -> Result<(Vec<BenchRow>, bool)> {
    let b = &cfg.bench;
    let rows = bench_attention(&b.lengths, b.d_head, &b.attn, cfg.seed)?;
    let mut csv = String::from(
        "n,predicted_selection_mas,measured_selection_mas,predicted_attention_mas,\
         measured_attention_mas,gathered_elems,dense_mas,wall_ms\n",
    );
    let mut all_match = true;
    for r in &rows {
        all_match &= r.counts_match();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.n,
            r.predicted.selection_mas,
            r.measured.selection_mas,
            r.predicted.attention_mas,
            r.measured.attention_mas,
            r.measured.gathered_elems,
            r.dense_mas,
            r.wall_ms
        ));
        record(sink, cfg, "bench_attention_mas", r.n, r.measured.attention_mas as f64, r.wall_ms)?;
        record(sink, cfg, "bench_dense_mas", r.n, r.dense_mas as f64, r.wall_ms)?;
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("bench.csv"), csv)?;
    Ok((rows, all_match))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::MsConfig;
    use crate::model::ModelConfig;

    /// Config small enough for unit-test turnaround.
    fn quick_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.to_path_buf();
        cfg.model = ModelConfig {
            layers: 1,
            heads: 1,
            d_model: 16,
            d_head: 16,
            vocab: 64,
            max_seq: 64,
            attn: MsConfig {
                s_q: 8,
                s_k: 8,
                topk: 3,
                merges: 2,
                topn: 4,
                ..MsConfig::default()
            },
            pos: PosEncoding::rope(16),
            optim: Default::default(),
        };
        cfg.train.steps = 3;
        cfg.train.seq_len = 64;
        cfg.train.corpus_tokens = 1024;
        cfg.eval.context_lengths = vec![64];
        cfg.eval.passkey_trials = 2;
        cfg.eval.passkey_key_len = 3;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn train_then_eval_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(dir.path());
        let sink = RecordSink::create(&cfg.out_dir).unwrap();
        let summary = run_train(&cfg, &sink).unwrap();
        assert!(summary.checkpoint.join("manifest.json").exists());
        assert!(cfg.out_dir.join("train_curve.csv").exists());
        let ppl = run_eval_ppl(&cfg, &sink, None).unwrap();
        assert!(ppl[0].1.is_finite() && ppl[0].1 > 1.0);
        let pk = run_eval_passkey(&cfg, &sink, None).unwrap();
        assert!(pk[0].acc.is_some());
        let recs = super::super::records::read_jsonl(sink.jsonl_path()).unwrap();
        let metrics: Vec<&str> = recs.iter().map(|r| r.metric.as_str()).collect();
        assert!(metrics.contains(&"train_loss_final"));
        assert!(metrics.contains(&"ppl"));
        assert!(metrics.contains(&"passkey_acc"));
    }

    #[test]
    fn eval_without_checkpoint_names_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(dir.path());
        let sink = RecordSink::create(&cfg.out_dir).unwrap();
        let err = run_eval_ppl(&cfg, &sink, None).unwrap_err();
        assert!(err.to_string().contains("run train first"), "{err}");
    }

    #[test]
    fn resume_continues_the_step_counter() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg(dir.path());
        let sink = RecordSink::create(&cfg.out_dir).unwrap();
        run_train(&cfg, &sink).unwrap();
        cfg.train.resume = true;
        run_train(&cfg, &sink).unwrap();
        let st = load_state(&cfg, None).unwrap();
        assert_eq!(st.step(), 6, "3 fresh + 3 resumed");
    }

    #[test]
    fn resume_into_finetune_attaches_adapters_and_restarts_the_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg(dir.path());
        let sink = RecordSink::create(&cfg.out_dir).unwrap();
        run_train(&cfg, &sink).unwrap();
        cfg.train.resume = true;
        cfg.train.scope = ScopeKind::Finetune;
        cfg.train.lora_variant = "ko".into();
        cfg.train.lora_rank = 2;
        run_train(&cfg, &sink).unwrap();
        let st = load_state(&cfg, None).unwrap();
        assert_eq!(st.step(), 3, "optimizer restarted at the scope switch");
        assert_eq!(st.tokens_seen, 6 * 64, "token clock keeps running");
        assert!(matches!(st.scope, TrainScope::Finetune(_)));
        assert!(st.params.blocks[0].wk.lora.is_some());
        assert!(st.params.blocks[0].wq.lora.is_none());
    }

    #[test]
    fn bench_counters_match_and_csv_lands() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg(dir.path());
        cfg.bench.lengths = vec![256, 512];
        cfg.bench.d_head = 16;
        cfg.validate().unwrap();
        let sink = RecordSink::create(&cfg.out_dir).unwrap();
        let (rows, all_match) = run_bench(&cfg, &sink).unwrap();
        assert!(all_match);
        assert_eq!(rows.len(), 2);
        let csv = std::fs::read_to_string(cfg.out_dir.join("bench.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
