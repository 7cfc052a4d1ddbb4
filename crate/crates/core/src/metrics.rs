//! Metrics rows and the episode-accuracy statistics used for reporting.
//!
//! The metrics file holds only deterministic columns so equal-seed runs are
//! byte-identical; wall-clock timings go to a separate sidecar file.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

/// One per-epoch or per-evaluation row.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub epoch: u64,
    /// `train`, `meta_val`, or `meta_test`.
    pub split: &'static str,
    /// Mean episode accuracy in percent.
    pub accuracy_pct: f64,
    /// 95% confidence half-width, percent.
    pub ci95: f64,
    pub cls_loss: f64,
    pub matching_loss: f64,
    pub total_loss: f64,
    /// Wall-clock seconds for the epoch or evaluation. Written to the
    /// timings sidecar, never to the metrics file.
    pub wall_seconds: f64,
}

/// Mean and 95% half-width (`1.96 * s / sqrt(n)`, Bessel-corrected sample
/// standard deviation). A single value has zero width.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Append-only CSV writers for metrics and timings.
pub struct MetricsWriter {
    metrics: BufWriter<File>,
    timings: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(metrics_path: &Path, timings_path: &Path) -> Result<Self> {
        let mut metrics = BufWriter::new(File::create(metrics_path)?);
        writeln!(
            metrics,
            "epoch,split,accuracy_pct,ci95,cls_loss,matching_loss,total_loss"
        )?;
        let mut timings = BufWriter::new(File::create(timings_path)?);
        writeln!(timings, "epoch,split,wall_seconds")?;
        Ok(MetricsWriter { metrics, timings })
    }

    pub fn append(&mut self, r: &MetricsRecord) -> Result<()> {
        writeln!(
            self.metrics,
            "{},{},{:.4},{:.4},{:.6},{:.6},{:.6}",
            r.epoch, r.split, r.accuracy_pct, r.ci95, r.cls_loss, r.matching_loss, r.total_loss
        )?;
        self.metrics.flush()?;
        writeln!(self.timings, "{},{},{:.3}", r.epoch, r.split, r.wall_seconds)?;
        self.timings.flush()?;
        Ok(())
    }
}
