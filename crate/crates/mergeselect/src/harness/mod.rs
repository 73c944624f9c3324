//! Experiment harness: one TOML config drives training, perplexity and
//! passkey evaluation, cost benchmarking, and a runtime oracle suite.
//!
//! Results land as append-only JSONL plus CSV, tagged with a digest of the
//! config that produced them, so records from different settings can never
//! be confused and identical runs reproduce byte-for-byte apart from wall
//! times.

pub mod check;
pub mod config;
pub mod corpus;
pub mod driver;
pub mod eval;
pub mod passkey;
pub mod records;

pub use check::{oracle_check, CheckLine};
pub use config::{
    desk_model, BenchSection, CorpusKind, EvalSection, RunConfig, ScopeKind, TrainSection,
};
pub use corpus::{
    load_utf8, mixture_corpus, zipf_corpus, FillerStream, MIN_VOCAB, TOK_BOS, TOK_DIGIT0,
    TOK_FILLER0, TOK_KEY, TOK_PROMPT,
};
pub use driver::{
    build_corpus, eval_encoding, load_state, run_bench, run_eval_passkey, run_eval_ppl, run_train,
    TrainSummary,
};
pub use eval::{
    bench_attention, eval_passkey, eval_ppl, eval_ppl_dense, fit_for, BenchRow, PasskeyOutcome,
};
pub use passkey::{gen_passkey, Passkey, PasskeySpec};
pub use records::{read_jsonl, RecordSink, ResultRecord};
