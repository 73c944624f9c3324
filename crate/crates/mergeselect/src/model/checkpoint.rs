//! Checkpoint directory: `manifest.json` describing every tensor plus one
//! flat little-endian f32 blob `params.bin`. Parameters and both optimizer
//! moment trees are stored, along with the RNG position, so a resumed run
//! continues bit for bit.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lora::TrainScope;
use super::optim::AdamW;
use super::train::TrainState;
use super::{ModelConfig, Params};
use crate::error::{MsError, Result};

const FORMAT: &str = "msck1";
const BLOB: &str = "params.bin";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Offset into the blob, in elements.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct RngMeta {
    seed_hex: String,
    word_pos: String,
    stream: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    step: u64,
    tokens_seen: u64,
    seed: u64,
    scope: TrainScope,
    lora_rank: Option<usize>,
    rng: RngMeta,
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
}

fn tree_entries<'a>(
    params: &'a Params<f32>,
    opt: &'a AdamW<f32>,
) -> Vec<(String, ndarray::ArrayViewD<'a, f32>)> {
    let mut out = Vec::new();
    for (name, view) in params.flatten() {
        out.push((format!("param.{name}"), view));
    }
    for (name, view) in opt.m.flatten() {
        out.push((format!("opt_m.{name}"), view));
    }
    for (name, view) in opt.v.flatten() {
        out.push((format!("opt_v.{name}"), view));
    }
    out
}

pub fn save_checkpoint(dir: &Path, state: &TrainState<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let entries = tree_entries(&state.params, &state.opt);
    let mut tensors = Vec::with_capacity(entries.len());
    let mut offset = 0usize;
    let blob_path = dir.join(BLOB);
    let mut blob = BufWriter::new(fs::File::create(&blob_path)?);
    for (name, view) in &entries {
        let len = view.len();
        tensors.push(TensorMeta {
            name: name.clone(),
            shape: view.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            len,
        });
        for &v in view.iter() {
            blob.write_all(&v.to_le_bytes())?;
        }
        offset += len;
    }
    blob.flush()?;

    let seed_hex: String = state
        .rng
        .get_seed()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        step: state.opt.step,
        tokens_seen: state.tokens_seen,
        seed: state.seed,
        scope: state.scope,
        lora_rank: state.lora_rank,
        rng: RngMeta {
            seed_hex,
            word_pos: state.rng.get_word_pos().to_string(),
            stream: state.rng.get_stream(),
        },
        config: state.cfg.clone(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| MsError::Serde(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState<f32>> {
    let manifest_raw = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| MsError::Checkpoint(format!("manifest unreadable: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&manifest_raw)
        .map_err(|e| MsError::Checkpoint(format!("manifest malformed: {e}")))?;
    if manifest.format != FORMAT {
        return Err(MsError::Checkpoint(format!(
            "format '{}', expected '{FORMAT}'",
            manifest.format
        )));
    }
    manifest.config.validate()?;

    let mut blob_bytes = Vec::new();
    fs::File::open(dir.join(BLOB))
        .map_err(|e| MsError::Checkpoint(format!("blob unreadable: {e}")))?
        .read_to_end(&mut blob_bytes)?;
    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if blob_bytes.len() != total * 4 {
        return Err(MsError::Checkpoint(format!(
            "blob holds {} bytes, manifest expects {}",
            blob_bytes.len(),
            total * 4
        )));
    }

    // Rebuild the tree shape, then overwrite every tensor from the blob.
    let mut state = TrainState::<f32>::new(
        manifest.config.clone(),
        manifest.scope,
        manifest.lora_rank,
        manifest.seed,
    )?;
    {
        let mut views = Vec::new();
        for (name, view) in state.params.flatten_mut() {
            views.push((format!("param.{name}"), view));
        }
        for (name, view) in state.opt.m.flatten_mut() {
            views.push((format!("opt_m.{name}"), view));
        }
        for (name, view) in state.opt.v.flatten_mut() {
            views.push((format!("opt_v.{name}"), view));
        }
        if views.len() != manifest.tensors.len() {
            return Err(MsError::Checkpoint(format!(
                "{} tensors in manifest, model has {}",
                manifest.tensors.len(),
                views.len()
            )));
        }
        for (meta, (name, view)) in manifest.tensors.iter().zip(views.iter_mut()) {
            if meta.name != *name {
                return Err(MsError::Checkpoint(format!(
                    "tensor order mismatch: manifest '{}', model '{}'",
                    meta.name, name
                )));
            }
            if meta.dtype != "f32" {
                return Err(MsError::Checkpoint(format!(
                    "tensor '{}' dtype '{}', only f32 supported",
                    meta.name, meta.dtype
                )));
            }
            if meta.shape != view.shape() {
                return Err(MsError::Checkpoint(format!(
                    "tensor '{}' shape {:?} vs expected {:?}",
                    meta.name,
                    meta.shape,
                    view.shape()
                )));
            }
            let base = meta.offset * 4;
            for (i, slot) in view.iter_mut().enumerate() {
                let at = base + i * 4;
                let bytes: [u8; 4] = blob_bytes[at..at + 4].try_into().expect("length checked");
                *slot = f32::from_le_bytes(bytes);
            }
        }
    }

    let seed_bytes = parse_hex_seed(&manifest.rng.seed_hex)?;
    let mut rng = ChaCha8Rng::from_seed(seed_bytes);
    rng.set_stream(manifest.rng.stream);
    let word_pos: u128 = manifest
        .rng
        .word_pos
        .parse()
        .map_err(|_| MsError::Checkpoint("rng word_pos malformed".into()))?;
    rng.set_word_pos(word_pos);
    state.rng = rng;
    state.opt.step = manifest.step;
    state.tokens_seen = manifest.tokens_seen;
    Ok(state)
}

fn parse_hex_seed(hex: &str) -> Result<[u8; 32]> {
    if hex.len() != 64 || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(MsError::Checkpoint("rng seed malformed".into()));
    }
    let mut out = [0u8; 32];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).expect("hex checked");
    }
    Ok(out)
}
