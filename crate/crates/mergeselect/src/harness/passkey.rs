//! Passkey retrieval sequences.
//!
//! A sequence hides a short digit key inside filler and ends by asking for
//! it back:
//!
//! ```text
//! BOS  filler^f1  KEY d_1..d_k KEY  filler^f2  PROMPT  d_1..d_k
//! ```
//!
//! The total length is exactly `len`; `f1 + f2 = len - 4 - 2k`. Scoring is
//! exact match: a trial counts only if all `k` greedily decoded tokens equal
//! the key. `key_len` 0 drops the key and marker spans entirely, leaving
//! `BOS filler PROMPT` with an empty answer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{FillerStream, TOK_BOS, TOK_DIGIT0, TOK_KEY, TOK_PROMPT};
use crate::error::{MsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasskeySpec {
    /// Total sequence length, answer included.
    pub len: usize,
    /// Digits in the key.
    pub key_len: usize,
    /// Key placement as a fraction of the available filler; `None` places
    /// it uniformly at random.
    pub pos: Option<f64>,
    /// Zipf exponent of the filler distribution.
    pub filler_zipf: f64,
}

impl PasskeySpec {
    pub fn new(len: usize, key_len: usize, pos: Option<f64>) -> Self {
        PasskeySpec {
            len,
            key_len,
            pos,
            filler_zipf: 1.1,
        }
    }
}

pub struct Passkey {
    pub tokens: Vec<usize>,
    pub key: Vec<usize>,
    /// Index just past the PROMPT token; `tokens[prompt_end..]` is the
    /// answer span the model must reproduce.
    pub prompt_end: usize,
}

pub fn gen_passkey(spec: &PasskeySpec, vocab: usize, rng: &mut ChaCha8Rng) -> Result<Passkey> {
    let k = spec.key_len;
    let overhead = if k == 0 { 2 } else { 4 + 2 * k };
    if spec.len < overhead {
        return Err(MsError::InvalidConfig(format!(
            "passkey length {} cannot hold key_len {k} (need >= {overhead})",
            spec.len
        )));
    }
    if let Some(p) = spec.pos {
        if !(0.0..=1.0).contains(&p) {
            return Err(MsError::InvalidConfig(format!(
                "key position fraction {p} outside [0, 1]"
            )));
        }
    }
    let mut filler = FillerStream::new(vocab, spec.filler_zipf, rng)?;
    let mut tokens = Vec::with_capacity(spec.len);
    tokens.push(TOK_BOS);
    if k == 0 {
        for _ in 0..spec.len - 2 {
            tokens.push(filler.next(rng));
        }
        tokens.push(TOK_PROMPT);
        return Ok(Passkey {
            tokens,
            key: Vec::new(),
            prompt_end: spec.len,
        });
    }
    let f_total = spec.len - overhead;
    let f1 = match spec.pos {
        Some(p) => ((p * f_total as f64).round() as usize).min(f_total),
        None => rng.gen_range(0..=f_total),
    };
    let key: Vec<usize> = (0..k).map(|_| TOK_DIGIT0 + rng.gen_range(0..10)).collect();
    for _ in 0..f1 {
        tokens.push(filler.next(rng));
    }
    tokens.push(TOK_KEY);
    tokens.extend_from_slice(&key);
    tokens.push(TOK_KEY);
    for _ in 0..f_total - f1 {
        tokens.push(filler.next(rng));
    }
    tokens.push(TOK_PROMPT);
    tokens.extend_from_slice(&key);
    debug_assert_eq!(tokens.len(), spec.len);
    Ok(Passkey {
        tokens,
        key,
        prompt_end: spec.len - k,
    })
}
