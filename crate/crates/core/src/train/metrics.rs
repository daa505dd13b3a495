//! Append-only, line-delimited JSON metrics.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Set to `1` to zero every wall-clock field, making logs reproducible byte for byte.
pub const DETERMINISTIC_ENV: &str = "WAVEUNETD_DETERMINISTIC";

pub fn deterministic_from_env() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_fm: f64,
    pub g_mel: f64,
    pub g_total: f64,
    /// Seconds spent in this step; zero in deterministic mode.
    pub wall_time: f64,
}

impl StepRecord {
    pub fn all_finite(&self) -> bool {
        [self.d_loss, self.g_adv, self.g_fm, self.g_mel, self.g_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Opens `path` for appending, creating it if needed.
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(f),
        })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out
            .write_all(b"\n")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Mean of `values[end - window .. end]`, clamped at the start.
pub fn trailing_mean(values: &[f64], end: usize, window: usize) -> f64 {
    let end = end.min(values.len());
    let start = end.saturating_sub(window);
    if end == start {
        return f64::NAN;
    }
    values[start..end].iter().sum::<f64>() / (end - start) as f64
}
