//! Synthetic corpora and a plain-text loader.
//!
//! Token ids 0..=12 are reserved for the retrieval protocol (digits, key
//! marker, prompt marker, begin-of-sequence); everything from [`TOK_FILLER0`]
//! up is filler vocabulary. Filler is drawn from a Zipf rank distribution
//! threaded through a fixed successor table, so the stream has both
//! heavy-tailed unigram statistics and learnable bigram structure.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::error::{MsError, Result};

/// Digit tokens occupy ids 0..=9; digit d is token `TOK_DIGIT0 + d`.
pub const TOK_DIGIT0: usize = 0;
/// Marks both ends of the key span.
pub const TOK_KEY: usize = 10;
/// Asks for the key back; the answer tokens follow immediately.
pub const TOK_PROMPT: usize = 11;
pub const TOK_BOS: usize = 12;
/// First filler id; filler occupies `TOK_FILLER0..vocab`.
pub const TOK_FILLER0: usize = 13;

/// Smallest vocabulary the reserved layout plus a nontrivial filler
/// range requires.
pub const MIN_VOCAB: usize = TOK_FILLER0 + 2;

fn check_vocab(vocab: usize) -> Result<usize> {
    if vocab < MIN_VOCAB {
        return Err(MsError::InvalidConfig(format!(
            "vocab {vocab} too small for the reserved token layout (need >= {MIN_VOCAB})"
        )));
    }
    Ok(vocab - TOK_FILLER0)
}

/// Filler sampler: with probability 0.6 follow a fixed random successor
/// table from the previous filler token, otherwise draw a fresh Zipf rank.
pub struct FillerStream {
    succ: Vec<usize>,
    zipf: Zipf<f64>,
    prev: usize,
}

impl FillerStream {
    pub fn new(vocab: usize, exponent: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let m = check_vocab(vocab)?;
        if !(exponent > 0.0) {
            return Err(MsError::InvalidConfig(format!(
                "zipf exponent must be positive, got {exponent}"
            )));
        }
        let zipf = Zipf::new(m as u64, exponent)
            .map_err(|e| MsError::InvalidConfig(format!("zipf({m}, {exponent}): {e}")))?;
        let mut succ: Vec<usize> = (0..m).collect();
        succ.shuffle(rng);
        Ok(FillerStream { succ, zipf, prev: 0 })
    }

    pub fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        self.prev = if rng.gen_bool(0.6) {
            self.succ[self.prev]
        } else {
            self.zipf.sample(rng) as usize - 1
        };
        TOK_FILLER0 + self.prev
    }
}

/// Pure filler corpus of exactly `len` tokens.
pub fn zipf_corpus(vocab: usize, len: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = FillerStream::new(vocab, 1.1, &mut rng)?;
    Ok((0..len).map(|_| stream.next(&mut rng)).collect())
}

/// Filler interleaved with copy and retrieval episodes:
///
/// ```text
/// BOS filler{16..=64}  KEY d^k KEY  (filler{gap} PROMPT d^k){1..=3}
/// BOS filler{16..=64}  u_1..u_L u_1..u_L
/// ```
///
/// Two in three episodes are keyed: the digits after each PROMPT repeat the
/// digits between the most recent KEY markers, which is exactly the copy
/// skill the passkey evaluation measures, at gaps that are short (8..=48)
/// half the time and long (48..=192) otherwise, without competing keys.
/// The rest are verbatim repeats of a fresh uniform filler block
/// (L in 24..=80), denser supervision for the same successor-copying
/// circuit. Episodes open with BOS so the evaluation prefix stays
/// in-distribution. `key_len` 0 degenerates to pure filler.
pub fn mixture_corpus(vocab: usize, len: usize, key_len: usize, seed: u64) -> Result<Vec<usize>> {
    check_vocab(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = FillerStream::new(vocab, 1.1, &mut rng)?;
    let mut out = Vec::with_capacity(len + 768);
    while out.len() < len {
        out.push(TOK_BOS);
        for _ in 0..rng.gen_range(16..=64) {
            out.push(stream.next(&mut rng));
        }
        if key_len == 0 {
            continue;
        }
        if rng.gen_range(0..3) == 0 {
            let block: Vec<usize> = (0..rng.gen_range(24..=80))
                .map(|_| rng.gen_range(TOK_FILLER0..vocab))
                .collect();
            out.extend_from_slice(&block);
            out.extend_from_slice(&block);
            continue;
        }
        let key: Vec<usize> = (0..key_len)
            .map(|_| TOK_DIGIT0 + rng.gen_range(0..10))
            .collect();
        out.push(TOK_KEY);
        out.extend_from_slice(&key);
        out.push(TOK_KEY);
        for _ in 0..rng.gen_range(1..=3) {
            let gap = if rng.gen_bool(0.5) {
                rng.gen_range(8..=48)
            } else {
                rng.gen_range(48..=192)
            };
            for _ in 0..gap {
                out.push(stream.next(&mut rng));
            }
            out.push(TOK_PROMPT);
            out.extend_from_slice(&key);
        }
    }
    out.truncate(len);
    Ok(out)
}

/// Reads a UTF-8 text file and tokenizes it one byte per token, which needs
/// `vocab >= 256`. Invalid UTF-8 and empty files are rejected.
pub fn load_utf8(path: &Path, vocab: usize) -> Result<Vec<usize>> {
    if vocab < 256 {
        return Err(MsError::InvalidConfig(format!(
            "byte-level text needs vocab >= 256, got {vocab}"
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| {
        MsError::InvalidConfig(format!("reading {} as utf-8: {e}", path.display()))
    })?;
    if text.is_empty() {
        return Err(MsError::InvalidConfig(format!(
            "corpus file {} is empty",
            path.display()
        )));
    }
    Ok(text.bytes().map(|b| b as usize).collect())
}
