//! Command-line front end.
//!
//! `--config` points at a TOML run file; without it the desk-scale defaults
//! apply. Flags override the file. Every subcommand exits nonzero on an
//! invariant violation, not just on hard errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mergeselect::harness::{
    oracle_check, run_bench, run_eval_passkey, run_eval_ppl, run_train, RecordSink, RunConfig,
    ScopeKind,
};

#[derive(Parser)]
#[command(name = "mergeselect", version, about = "Merge-select sparse attention workbench")]
struct Cli {
    /// TOML run config; desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train (or resume) and checkpoint into the output directory.
    Train {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seq_len: Option<usize>,
        /// full | finetune
        #[arg(long)]
        scope: Option<String>,
        #[arg(long)]
        resume: bool,
    },
    /// Perplexity of the checkpoint over the configured context lengths.
    EvalPpl {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated context lengths, e.g. 256,512,1024.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        /// Inference-time ntk scale override.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Passkey retrieval accuracy of the checkpoint.
    EvalPasskey {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Sparse-kernel cost at each length: closed form vs instrumented.
    Bench {
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
    },
    /// Re-derive the dual-route invariants and report pass/fail.
    OracleCheck,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    apply_overrides(&mut cfg, &cli.cmd)?;
    cfg.validate()?;
    let sink = RecordSink::create(&cfg.out_dir)?;
    println!("run {} (config {})", cfg.run_id(), cfg.config_hash());

    match cli.cmd {
        Cmd::Train { .. } => {
            let s = run_train(&cfg, &sink)?;
            println!(
                "trained {} steps: loss {:.4} -> {:.4}, {} tokens, checkpoint {}",
                s.steps,
                s.first_loss,
                s.final_loss,
                s.tokens_seen,
                s.checkpoint.display()
            );
        }
        Cmd::EvalPpl { checkpoint, .. } => {
            for (n, ppl) in run_eval_ppl(&cfg, &sink, checkpoint.as_deref())? {
                println!("ppl @ {n}: {ppl:.4}");
            }
        }
        Cmd::EvalPasskey { checkpoint, .. } => {
            for o in run_eval_passkey(&cfg, &sink, checkpoint.as_deref())? {
                match o.acc {
                    Some(acc) => println!("passkey @ {}: {acc:.3}", o.len),
                    None => eprintln!(
                        "warning: passkey @ {} skipped, over the {}-token budget",
                        o.len, cfg.eval.max_context
                    ),
                }
            }
        }
        Cmd::Bench { .. } => {
            let (rows, all_match) = run_bench(&cfg, &sink)?;
            for r in &rows {
                println!(
                    "n {:>6}: attention {:>12} mas (dense {:>14}), {:>8.2} ms{}",
                    r.n,
                    r.measured.attention_mas,
                    r.dense_mas,
                    r.wall_ms,
                    if r.counts_match() { "" } else { "  COUNTER MISMATCH" }
                );
            }
            println!("wrote {}", cfg.out_dir.join("bench.csv").display());
            if !all_match {
                eprintln!("error: instrumented counters diverged from the closed form");
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::OracleCheck => {
            let lines = oracle_check(cfg.seed);
            let mut all = true;
            for l in &lines {
                all &= l.pass;
                println!("{} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
            }
            if !all {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn apply_overrides(cfg: &mut RunConfig, cmd: &Cmd) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Cmd::Train {
            steps,
            seq_len,
            scope,
            resume,
        } => {
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            if let Some(n) = seq_len {
                cfg.train.seq_len = *n;
            }
            if let Some(scope) = scope {
                cfg.train.scope = match scope.as_str() {
                    "full" => ScopeKind::Full,
                    "finetune" => ScopeKind::Finetune,
                    other => return Err(format!("unknown scope '{other}'").into()),
                };
            }
            cfg.train.resume |= resume;
        }
        Cmd::EvalPpl { lengths, scale, .. } => {
            if let Some(l) = lengths {
                cfg.eval.context_lengths = l.clone();
            }
            if let Some(s) = scale {
                cfg.eval.scale_override = Some(*s);
            }
        }
        Cmd::EvalPasskey {
            lengths,
            trials,
            scale,
            ..
        } => {
            if let Some(l) = lengths {
                cfg.eval.context_lengths = l.clone();
            }
            if let Some(s) = scale {
                cfg.eval.scale_override = Some(*s);
            }
            if let Some(t) = trials {
                cfg.eval.passkey_trials = *t;
            }
        }
        Cmd::Bench { lengths } => {
            if let Some(l) = lengths {
                cfg.bench.lengths = l.clone();
            }
        }
        Cmd::OracleCheck => {}
    }
    Ok(())
}
