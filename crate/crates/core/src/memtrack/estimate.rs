//! Analytic model-state memory under mixed precision.
//!
//! Working weights and gradients are stored at `working_bytes` per element;
//! master weights and optimizer moments at `master_bytes` / `moment_bytes`.
//! The default policy (2/4/4) splits AdamW's twelve optimizer bytes per
//! parameter into master copy, first moment and second moment.
//!
//! `aux` (N) is the count of auxiliary trainable elements: adapter weights for
//! LoRA, or the transient gradient residency of the fused methods. Both are
//! `O(N)` terms with `N << M`.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EstimateError {
    #[error("unknown method '{0}' (expected adamw, adafactor, lora, lomo or adalomo)")]
    UnknownMethod(String),
    #[error("model parameter count must be positive")]
    EmptyModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimateMethod {
    AdamW,
    Adafactor,
    LoRA,
    Lomo,
    AdaLomo,
}

impl EstimateMethod {
    pub const ALL: [EstimateMethod; 5] = [
        EstimateMethod::AdamW,
        EstimateMethod::Adafactor,
        EstimateMethod::LoRA,
        EstimateMethod::Lomo,
        EstimateMethod::AdaLomo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimateMethod::AdamW => "adamw",
            EstimateMethod::Adafactor => "adafactor",
            EstimateMethod::LoRA => "lora",
            EstimateMethod::Lomo => "lomo",
            EstimateMethod::AdaLomo => "adalomo",
        }
    }
}

impl fmt::Display for EstimateMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimateMethod {
    type Err = EstimateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adamw" => Ok(EstimateMethod::AdamW),
            "adafactor" => Ok(EstimateMethod::Adafactor),
            "lora" => Ok(EstimateMethod::LoRA),
            "lomo" => Ok(EstimateMethod::Lomo),
            "adalomo" => Ok(EstimateMethod::AdaLomo),
            _ => Err(EstimateError::UnknownMethod(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PrecisionPolicy {
    pub working_bytes: u64,
    pub master_bytes: u64,
    pub moment_bytes: u64,
}

impl PrecisionPolicy {
    pub const MIXED: PrecisionPolicy = PrecisionPolicy {
        working_bytes: 2,
        master_bytes: 4,
        moment_bytes: 4,
    };
}

impl Default for PrecisionPolicy {
    fn default() -> Self {
        PrecisionPolicy::MIXED
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnalyticEstimate {
    pub method: EstimateMethod,
    pub params: u64,
    pub aux: u64,
    pub policy: PrecisionPolicy,
    pub param_bytes: u64,
    pub grad_bytes: u64,
    pub optim_bytes: u64,
}

impl AnalyticEstimate {
    pub fn total_bytes(&self) -> u64 {
        self.param_bytes + self.grad_bytes + self.optim_bytes
    }

    /// Total expressed in units of M bytes.
    pub fn total_in_m(&self) -> f64 {
        self.total_bytes() as f64 / self.params as f64
    }

    pub fn to_text(&self) -> String {
        let m = self.params as f64;
        format!(
            "method: {}\nparams: {}\naux: {}\nparam_bytes: {}\ngrad_bytes: {}\noptim_state_bytes: {}\ntotal_bytes: {}\nparam_per_m: {:.6}\ngrad_per_m: {:.6}\noptim_state_per_m: {:.6}\ntotal_per_m: {:.6}\n",
            self.method,
            self.params,
            self.aux,
            self.param_bytes,
            self.grad_bytes,
            self.optim_bytes,
            self.total_bytes(),
            self.param_bytes as f64 / m,
            self.grad_bytes as f64 / m,
            self.optim_bytes as f64 / m,
            self.total_in_m(),
        )
    }
}

/// Elements of a factored second moment over `shapes`: `rows + cols` per
/// matrix (leading dims folded into rows), the full size for vectors.
pub fn factored_state_elements(shapes: &[Vec<usize>]) -> u64 {
    shapes
        .iter()
        .map(|s| match s.len() {
            0 => 0,
            1 => s[0] as u64,
            _ => {
                let cols = *s.last().unwrap() as u64;
                let rows: u64 = s[..s.len() - 1].iter().map(|&d| d as u64).product();
                rows + cols
            }
        })
        .sum()
}

pub fn shape_param_count(shapes: &[Vec<usize>]) -> u64 {
    shapes
        .iter()
        .map(|s| s.iter().map(|&d| d as u64).product::<u64>())
        .sum()
}

/// `floor(params / hidden²)` square matrices of side `hidden`.
pub fn square_matrix_shapes(params: u64, hidden: usize) -> Vec<Vec<usize>> {
    let per = (hidden * hidden) as u64;
    (0..params / per).map(|_| vec![hidden, hidden]).collect()
}

/// Parameter shapes of a LLaMA-7B style decoder (32 layers, hidden 4096,
/// intermediate 11008, vocab 32000, untied head).
pub fn llama7b_shapes() -> Vec<Vec<usize>> {
    let (h, i, v) = (4096, 11008, 32000);
    let mut shapes = vec![vec![v, h]];
    for _ in 0..32 {
        shapes.push(vec![h]);
        for _ in 0..4 {
            shapes.push(vec![h, h]);
        }
        shapes.push(vec![h]);
        shapes.push(vec![h, i]);
        shapes.push(vec![h, i]);
        shapes.push(vec![i, h]);
    }
    shapes.push(vec![h]);
    shapes.push(vec![h, v]);
    shapes
}

/// Estimates model-state bytes for `method` with `params` (M) model elements,
/// `aux` (N) auxiliary elements, and `shapes` describing the parameter tensors
/// (used by the factored methods).
pub fn analytic_estimate(
    method: EstimateMethod,
    params: u64,
    aux: u64,
    policy: PrecisionPolicy,
    shapes: &[Vec<usize>],
) -> Result<AnalyticEstimate, EstimateError> {
    if params == 0 {
        return Err(EstimateError::EmptyModel);
    }
    let PrecisionPolicy {
        working_bytes: w,
        master_bytes: master,
        moment_bytes: moment,
    } = policy;
    let factored = factored_state_elements(shapes);
    let (param_bytes, grad_bytes, optim_bytes) = match method {
        EstimateMethod::AdamW => (w * params, w * params, (master + 2 * moment) * params),
        EstimateMethod::Adafactor => (w * params, w * params, master * params + moment * factored),
        EstimateMethod::LoRA => (w * params, w * aux, (master + 2 * moment) * aux),
        EstimateMethod::Lomo => (w * params, w * aux, 0),
        EstimateMethod::AdaLomo => (w * params, w * aux, moment * factored),
    };
    Ok(AnalyticEstimate {
        method,
        params,
        aux,
        policy,
        param_bytes,
        grad_bytes,
        optim_bytes,
    })
}
