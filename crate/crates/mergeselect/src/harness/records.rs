//! Append-only result log: one JSON object per line, mirrored to CSV.
//!
//! Records are written in the field order below with wall time last, so two
//! runs of the same config produce byte-identical logs once the `wall_ms`
//! column is masked out.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub run_id: String,
    pub config_hash: String,
    pub metric: String,
    pub context_len: usize,
    pub value: f64,
    pub wall_ms: f64,
}

const CSV_HEADER: &str = "run_id,config_hash,metric,context_len,value,wall_ms";

/// Appends records to `results.jsonl` and `results.csv` under one directory.
pub struct RecordSink {
    jsonl: PathBuf,
    csv: PathBuf,
}

impl RecordSink {
    pub fn create(out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        let sink = RecordSink {
            jsonl: out_dir.join("results.jsonl"),
            csv: out_dir.join("results.csv"),
        };
        if !sink.csv.exists() {
            std::fs::write(&sink.csv, format!("{CSV_HEADER}\n"))?;
        }
        Ok(sink)
    }

    pub fn jsonl_path(&self) -> &Path {
        &self.jsonl
    }

    pub fn append(&self, rec: &ResultRecord) -> Result<()> {
        let mut j = OpenOptions::new().create(true).append(true).open(&self.jsonl)?;
        writeln!(j, "{}", serde_json::to_string(rec)?)?;
        let mut c = OpenOptions::new().append(true).open(&self.csv)?;
        writeln!(
            c,
            "{},{},{},{},{},{}",
            rec.run_id, rec.config_hash, rec.metric, rec.context_len, rec.value, rec.wall_ms
        )?;
        Ok(())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ResultRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
