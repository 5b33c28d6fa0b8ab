//! Fused-backward optimizers and the machinery to study them at desk scale.
//!
//! * [`tensor`]: dense row-major tensors.
//! * [`autograd`]: a reverse-mode tape whose fused mode updates each parameter
//!   as soon as its gradient is final.
//! * [`optim`]: LOMO, AdaLomo and the ablation optimizers, plus schedules.
//! * [`models`]: the two-basin test function, MLPs and a tiny transformer LM.
//! * [`memtrack`]: byte-level memory ledger and the analytic memory model.
//! * [`harness`]: experiment configs, data, training loops and output files.

pub mod autograd;
pub mod harness;
pub mod memtrack;
pub mod models;
pub mod optim;
pub mod tensor;
