//! One TOML file drives every subcommand.
//!
//! Unknown keys anywhere in the file are errors, every field is validated
//! before any compute starts, and the run id is a truncated digest of the
//! whole config, so result records are bound to the exact settings that
//! produced them.
//!
//! ```toml
//! seed = 42
//! out_dir = "runs/demo"
//!
//! [model]          # desk-scale decoder if omitted
//! layers = 4
//! heads = 4
//! d_model = 128
//! d_head = 32
//! vocab = 512
//! max_seq = 256
//! [model.pos]
//! kind = "crd_ntk"
//! d = 32
//! max = 512
//!
//! [train]
//! steps = 400
//! seq_len = 256
//! corpus = "mixture"   # zipf | mixture | file (+ corpus_path)
//! scope = "full"       # or "finetune" with lora_variant / lora_rank
//!
//! [eval]
//! context_lengths = [256, 512]
//! passkey_trials = 20
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::MsConfig;
use crate::error::{MsError, Result};
use crate::model::{LoraVariant, ModelConfig, OptimConfig, TrainScope};
use crate::positional::PosEncoding;

use super::corpus::MIN_VOCAB;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Zipf,
    Mixture,
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    Full,
    Finetune,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub seq_len: usize,
    pub batch: usize,
    pub corpus: CorpusKind,
    /// Text file for `corpus = "file"`; ignored otherwise.
    pub corpus_path: Option<PathBuf>,
    /// Synthetic corpus size in tokens.
    pub corpus_tokens: usize,
    /// Key digits per retrieval episode in the mixture corpus.
    pub key_len: usize,
    pub scope: ScopeKind,
    /// Which projections carry adapters when `scope = "finetune"`:
    /// ko | qk | q_only | qkvo.
    pub lora_variant: String,
    pub lora_rank: usize,
    /// Continue from the checkpoint in `out_dir` instead of reinitializing.
    pub resume: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 400,
            seq_len: 256,
            batch: 1,
            corpus: CorpusKind::Mixture,
            corpus_path: None,
            corpus_tokens: 1 << 15,
            key_len: 5,
            scope: ScopeKind::Full,
            lora_variant: "ko".into(),
            lora_rank: 4,
            resume: false,
        }
    }
}

impl TrainSection {
    pub fn train_scope(&self) -> Result<TrainScope> {
        Ok(match self.scope {
            ScopeKind::Full => TrainScope::Full,
            ScopeKind::Finetune => TrainScope::Finetune(LoraVariant::parse(&self.lora_variant)?),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub context_lengths: Vec<usize>,
    /// Evaluation corpus is truncated to this many tokens.
    pub ppl_tokens: usize,
    pub passkey_trials: usize,
    pub passkey_key_len: usize,
    /// Key placement fraction; unset places keys uniformly at random.
    pub passkey_pos: Option<f64>,
    /// Replaces the ntk scale at evaluation time (inference-time scaling).
    pub scale_override: Option<f64>,
    /// Context lengths above this are skipped with a warning record rather
    /// than attempted.
    pub max_context: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            context_lengths: vec![256, 512],
            ppl_tokens: 4096,
            passkey_trials: 20,
            passkey_key_len: 5,
            passkey_pos: None,
            scale_override: None,
            max_context: 16384,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub lengths: Vec<usize>,
    pub d_head: usize,
    pub attn: MsConfig,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            lengths: vec![1024, 2048, 4096, 8192, 16384],
            d_head: 64,
            attn: MsConfig::default(),
        }
    }
}

/// Desk-scale decoder: 4 layers, 4 heads of 32, vocab 512, 256-token
/// windows.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        layers: 4,
        heads: 4,
        d_model: 128,
        d_head: 32,
        vocab: 512,
        max_seq: 256,
        attn: MsConfig::default(),
        pos: PosEncoding::rope(32),
        optim: OptimConfig {
            lr: 3e-4,
            ..OptimConfig::default()
        },
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("runs/default"),
            model: desk_model(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.steps == 0 || t.batch == 0 {
            return Err(MsError::InvalidConfig("steps and batch must be positive".into()));
        }
        if t.seq_len < 2 || t.seq_len > self.model.max_seq {
            return Err(MsError::InvalidConfig(format!(
                "train seq_len {} outside 2..={}",
                t.seq_len, self.model.max_seq
            )));
        }
        match t.corpus {
            CorpusKind::File => {
                if t.corpus_path.is_none() {
                    return Err(MsError::InvalidConfig(
                        "corpus = \"file\" needs corpus_path".into(),
                    ));
                }
            }
            _ => {
                if t.corpus_tokens < t.seq_len {
                    return Err(MsError::InvalidConfig(format!(
                        "corpus_tokens {} shorter than seq_len {}",
                        t.corpus_tokens, t.seq_len
                    )));
                }
            }
        }
        if self.model.vocab < MIN_VOCAB {
            return Err(MsError::InvalidConfig(format!(
                "vocab {} below the reserved token layout minimum {MIN_VOCAB}",
                self.model.vocab
            )));
        }
        if t.scope == ScopeKind::Finetune {
            LoraVariant::parse(&t.lora_variant)?;
            if t.lora_rank == 0 {
                return Err(MsError::InvalidConfig("lora_rank must be positive".into()));
            }
        }
        let e = &self.eval;
        if e.context_lengths.is_empty() {
            return Err(MsError::InvalidConfig("eval needs context_lengths".into()));
        }
        if e.context_lengths.iter().any(|&n| n < 2) {
            return Err(MsError::InvalidConfig("context lengths must be >= 2".into()));
        }
        if e.ppl_tokens < 2 {
            return Err(MsError::InvalidConfig("ppl_tokens must be >= 2".into()));
        }
        if e.passkey_trials == 0 {
            return Err(MsError::InvalidConfig("passkey_trials must be positive".into()));
        }
        if let Some(p) = e.passkey_pos {
            if !(0.0..=1.0).contains(&p) {
                return Err(MsError::InvalidConfig(format!(
                    "passkey_pos {p} outside [0, 1]"
                )));
            }
        }
        if let Some(s) = e.scale_override {
            if !(s >= 1.0) {
                return Err(MsError::InvalidConfig(format!(
                    "scale_override {s} must be >= 1"
                )));
            }
        }
        let b = &self.bench;
        if b.lengths.is_empty() {
            return Err(MsError::InvalidConfig("bench needs lengths".into()));
        }
        for &n in &b.lengths {
            crate::attention::flop_account(n, b.d_head, &b.attn)?;
        }
        Ok(())
    }

    /// Digest of the full config in canonical JSON field order.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short prefix of [`Self::config_hash`], used to tag result records.
    pub fn run_id(&self) -> String {
        self.config_hash()[..12].to_string()
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoint")
    }
}
