//! Experiment harness: configs, data, training loops, and the CSV/JSON files
//! every run leaves behind.

pub mod config;
pub mod data;
mod output;
mod run;
pub mod trainer;
pub mod trajectory;

use std::path::PathBuf;

use thiserror::Error;

use crate::autograd::AutogradError;
use crate::memtrack::LedgerError;
use crate::optim::OptimError;

pub use config::{ConfigError, DataSpec, Experiment, ExperimentConfig, FusedMode, MethodSpec, ModelSpec};
pub use data::{ingest_text, DataError, MarkovSource, RegressionData, TokenSplit};
pub use output::{EvalRow, MemoryRow, StepRow, CSV_SCHEMA_VERSION};
pub use run::{default_out_dir, run, run_parallel, MethodRun, RunRecord, OUT_DIR_ENV};
pub use trainer::{StepOutcome, Trainer};
pub use trajectory::{classify, run_trajectory, search_starts, terminal_basin, Basin, TrajPoint, FROZEN_START};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{method}: non-finite loss {value} at step {step}")]
    NonFinite { method: String, step: u64, value: f64 },
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),
    #[error("worker thread for seed {0} panicked")]
    Worker(u64),
}

impl RunError {
    /// Process exit code: 2 for bad input, 3 for numeric blow-up, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Data(_) => 2,
            RunError::NonFinite { .. } => 3,
            _ => 1,
        }
    }
}
