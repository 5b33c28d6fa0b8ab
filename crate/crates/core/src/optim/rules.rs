//! Unfactored update rules: plain descent, the two single-moment ablations,
//! and Adam / AdamW. Each updates `theta` in place.

use crate::tensor::{Result, Tensor, TensorError};

fn check(theta: &Tensor, g: &Tensor, op: &'static str) -> Result<()> {
    if theta.dims() != g.dims() {
        return Err(TensorError::DimensionMismatch {
            op,
            left: theta.dims().to_vec(),
            right: g.dims().to_vec(),
        });
    }
    Ok(())
}

/// `θ ← θ − α·g`.
pub fn step_lomo(theta: &mut Tensor, g: &Tensor, alpha: f64) -> Result<()> {
    check(theta, g, "step_lomo")?;
    for (t, &gi) in theta.data_mut().iter_mut().zip(g.data()) {
        *t -= alpha * gi;
    }
    Ok(())
}

/// First moment only.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub m: Tensor,
    pub t: u64,
}

impl MomentumState {
    pub fn new(like: &Tensor) -> Self {
        MomentumState {
            m: like.zeros_like(),
            t: 0,
        }
    }
}

pub fn step_momentum(
    theta: &mut Tensor,
    g: &Tensor,
    state: &mut MomentumState,
    alpha: f64,
    beta1: f64,
) -> Result<()> {
    check(theta, g, "step_momentum")?;
    state.t += 1;
    let bc = 1.0 - beta1.powi(state.t as i32);
    let th = theta.data_mut();
    for ((t, m), &gi) in th.iter_mut().zip(state.m.data_mut()).zip(g.data()) {
        *m = beta1 * *m + (1.0 - beta1) * gi;
        *t -= alpha * (*m / bc);
    }
    Ok(())
}

/// Second moment only.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceState {
    pub v: Tensor,
    pub t: u64,
}

impl VarianceState {
    pub fn new(like: &Tensor) -> Self {
        VarianceState {
            v: like.zeros_like(),
            t: 0,
        }
    }
}

pub fn step_variance(
    theta: &mut Tensor,
    g: &Tensor,
    state: &mut VarianceState,
    alpha: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check(theta, g, "step_variance")?;
    state.t += 1;
    let bc = 1.0 - beta2.powi(state.t as i32);
    let th = theta.data_mut();
    for ((t, v), &gi) in th.iter_mut().zip(state.v.data_mut()).zip(g.data()) {
        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
        *t -= alpha * gi / ((*v / bc).sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn new(like: &Tensor) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }
}

pub fn step_adam(
    theta: &mut Tensor,
    g: &Tensor,
    state: &mut AdamState,
    alpha: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check(theta, g, "step_adam")?;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let th = theta.data_mut();
    let moments = state.m.data_mut().iter_mut().zip(state.v.data_mut());
    for ((t, (m, v)), &gi) in th.iter_mut().zip(moments).zip(g.data()) {
        *m = beta1 * *m + (1.0 - beta1) * gi;
        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
        *t -= alpha * (*m / bc1) / ((*v / bc2).sqrt() + eps);
    }
    Ok(())
}

/// Decoupled weight decay `θ ← θ − α·λ·θ` followed by the Adam step.
#[allow(clippy::too_many_arguments)]
pub fn step_adamw(
    theta: &mut Tensor,
    g: &Tensor,
    state: &mut AdamState,
    alpha: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    check(theta, g, "step_adamw")?;
    for t in theta.data_mut() {
        *t -= alpha * weight_decay * *t;
    }
    step_adam(theta, g, state, alpha, beta1, beta2, eps)
}
