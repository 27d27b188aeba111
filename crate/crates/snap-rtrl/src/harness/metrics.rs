//! One logged observation per interval, written as JSON lines. Each record
//! carries the config hash so it is self-contained. `wall_ms` is the only
//! field exempt from bit-identity across repeated runs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub tokens: u64,
    pub loss_nats: f64,
    pub bpc: f64,
    /// Copy-task curriculum level; absent for language modeling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    /// Held-out bits per character at the most recent evaluation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_bpc: Option<f64>,
    pub grad_norm: f64,
    pub accumulator_nnz: usize,
    pub madds: u64,
    pub wall_ms: u64,
    pub config_hash: String,
}

/// JSONL metrics sink; buffered, flushed on drop and after every write.
pub struct MetricsWriter {
    out: Option<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                Some(BufWriter::new(File::create(p)?))
            }
            None => None,
        };
        Ok(Self { out })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        if let Some(w) = &mut self.out {
            serde_json::to_writer(&mut *w, record)
                .map_err(|e| crate::error::Error::Config(format!("metrics encode: {e}")))?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_serialize_one_per_line() {
        let dir = std::env::temp_dir().join("snap-rtrl-metrics-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("metrics.jsonl");
        let mut w = MetricsWriter::new(Some(&path)).unwrap();
        for step in 0..3 {
            w.write(&MetricsRecord {
                step,
                tokens: step * 10,
                loss_nats: 0.5,
                bpc: 0.72,
                level: Some(1),
                val_bpc: None,
                grad_norm: 1.0,
                accumulator_nnz: 4,
                madds: 100,
                wall_ms: 1,
                config_hash: "deadbeef".into(),
            })
            .unwrap();
        }
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let parsed: MetricsRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(parsed.step, 1);
        assert_eq!(parsed.config_hash, "deadbeef");
        std::fs::remove_dir_all(&dir).ok();
    }
}
