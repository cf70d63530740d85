//! Line-delimited JSON trace datasets.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub readouts: Vec<u32>,
    pub label: Vec<u8>,
    pub seed: u64,
    /// Digest of the leakage and sensor parameters that produced the trace.
    pub params_checksum: String,
}

pub fn write_jsonl(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| CoreError::io(path, e))?;
        w.write_all(b"\n").map_err(|e| CoreError::io(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TraceRecord>> {
    let f = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CoreError::io(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
