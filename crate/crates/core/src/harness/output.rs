use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::memtrack::{Category, MemoryReport};

use super::trajectory::TrajPoint;
use super::RunError;

/// Bumped whenever a CSV header changes; recorded in `summary.json`.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub(crate) trait CsvRow: Serialize {
    const HEADER: &'static [&'static str];
}

/// One optimizer step of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub alpha: f64,
    pub train_loss: f64,
    pub backward_passes: u64,
}

impl CsvRow for StepRow {
    const HEADER: &'static [&'static str] = &["step", "alpha", "train_loss", "backward_passes"];
}

/// Validation metrics after `step` updates. Regression runs leave
/// perplexity and accuracy empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    pub loss: f64,
    pub perplexity: Option<f64>,
    pub accuracy: Option<f64>,
}

impl CsvRow for EvalRow {
    const HEADER: &'static [&'static str] = &["step", "loss", "perplexity", "accuracy"];
}

impl CsvRow for TrajPoint {
    const HEADER: &'static [&'static str] = &["step", "x", "y", "f"];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub method: String,
    pub category: String,
    pub live_bytes: usize,
    pub peak_bytes: usize,
    pub peak_count: usize,
}

impl CsvRow for MemoryRow {
    const HEADER: &'static [&'static str] = &["method", "category", "live_bytes", "peak_bytes", "peak_count"];
}

impl MemoryRow {
    pub fn from_report(report: &MemoryReport) -> Vec<MemoryRow> {
        Category::ALL
            .iter()
            .map(|&c| {
                let s = report.stats(c);
                MemoryRow {
                    method: report.method.clone(),
                    category: c.name().to_string(),
                    live_bytes: s.live_bytes,
                    peak_bytes: s.peak_bytes,
                    peak_count: s.peak_count,
                }
            })
            .collect()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    File::create(path).map(BufWriter::new).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Header row first, even when `rows` is empty.
pub(crate) fn write_csv<T: CsvRow>(path: &Path, rows: &[T]) -> Result<(), RunError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    w.write_record(T::HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|source| RunError::Io {
            path: path.to_path_buf(),
            source,
        })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}
