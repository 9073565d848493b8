//! Per-step metrics as JSON lines with a fixed field order.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{M2dError, Result};
use crate::training::TrainStepReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_m2d: f64,
    pub loss_off: f64,
    pub loss_total: f64,
    pub tau: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn from_report(r: &TrainStepReport, seconds: f64) -> Self {
        Self {
            step: r.step,
            loss_m2d: r.loss_m2d,
            loss_off: r.loss_off,
            loss_total: r.loss_total,
            tau: r.tau_used,
            seconds,
        }
    }
}

/// Appends one line per record and flushes after each.
pub struct MetricsWriter {
    path: PathBuf,
    file: std::fs::File,
}

impl MetricsWriter {
    /// Starts a fresh file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| M2dError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Keeps records with `step <= keep_through` and appends after them.
    pub fn resume(path: &Path, keep_through: u64) -> Result<Self> {
        let kept: Vec<MetricsRecord> = if path.exists() {
            read_metrics(path)?
                .into_iter()
                .filter(|r| r.step <= keep_through)
                .collect()
        } else {
            Vec::new()
        };
        let mut w = Self::create(path)?;
        for r in &kept {
            w.write(r)?;
        }
        Ok(w)
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| M2dError::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| M2dError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| M2dError::Corrupt {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_order_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&p).unwrap();
        for step in 1..=3 {
            w.write(&MetricsRecord {
                step,
                loss_m2d: 1.5,
                loss_off: 0.0,
                loss_total: 1.5,
                tau: 0.99995,
                seconds: 0.0,
            })
            .unwrap();
        }
        drop(w);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"step":1,"loss_m2d":1.5,"loss_off":0.0,"loss_total":1.5,"tau":0.99995,"seconds":0.0}"#
        );
        MetricsWriter::resume(&p, 2).unwrap();
        assert_eq!(read_metrics(&p).unwrap().len(), 2);
    }
}
