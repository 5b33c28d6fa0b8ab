//! Optimizers: LOMO, AdaLomo, the Adam family and its single-moment
//! ablations, an Adafactor-style factored baseline, and learning-rate
//! schedules.

mod factored;
mod optimizer;
mod rules;
mod schedule;

use thiserror::Error;

use crate::tensor::TensorError;

pub use factored::{
    grouped_normalize, reconstruct_v, step_adafactor, step_adalomo, update_factored, AdaLomoState,
    DenomMode, FactoredHyper, FactoredMoment, SecondMoment,
};
pub use optimizer::{Method, Optimizer, OptimizerConfig, ParamState, SlotKind, StateSlot};
pub use rules::{
    step_adam, step_adamw, step_lomo, step_momentum, step_variance, AdamState, MomentumState,
    VarianceState,
};
pub use schedule::{schedule_alpha, Schedule, ScheduleKind};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("unknown optimizer `{0}`")]
    UnknownMethod(String),
    #[error("no optimizer state for parameter #{0}")]
    UnknownParam(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
