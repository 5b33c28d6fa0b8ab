//! Factored second-moment estimation, grouped update normalization, and the
//! two optimizers built on them (AdaLomo and the Adafactor-style baseline).

use serde::Serialize;

use crate::tensor::{Result, Tensor, TensorError};

/// How `u` is formed from `g` and the second-moment estimate `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DenomMode {
    /// `u = g / (√v + eps1)`.
    #[default]
    Sqrt,
    /// `u = g / (v + eps1)`.
    Literal,
}

impl std::str::FromStr for DenomMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sqrt" => Ok(DenomMode::Sqrt),
            "literal" => Ok(DenomMode::Literal),
            other => Err(format!("unknown denominator mode `{other}` (sqrt|literal)")),
        }
    }
}

/// Row and column marginals of the second moment of an `m×n` gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredMoment {
    pub r: Tensor,
    pub c: Tensor,
}

impl FactoredMoment {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Ok(FactoredMoment {
            r: Tensor::zeros(vec![rows, 1])?,
            c: Tensor::zeros(vec![1, cols])?,
        })
    }

    pub fn rows(&self) -> usize {
        self.r.numel()
    }

    pub fn cols(&self) -> usize {
        self.c.numel()
    }

    pub fn numel(&self) -> usize {
        self.rows() + self.cols()
    }

    pub fn is_cold(&self) -> bool {
        self.r.sum() == 0.0
    }
}

/// Views any tensor of rank ≥ 2 as a matrix: leading dims collapse into rows.
fn matrix_view(dims: &[usize]) -> Option<(usize, usize)> {
    if dims.len() < 2 {
        return None;
    }
    let cols = *dims.last().unwrap();
    Some((dims.iter().product::<usize>() / cols, cols))
}

/// `r ← βr + (1−β)·rowsum(g²)`, `c ← βc + (1−β)·colsum(g²)`.
pub fn update_factored(fm: &mut FactoredMoment, g: &Tensor, beta: f64) -> Result<()> {
    let (rows, cols) = matrix_view(g.dims()).ok_or(TensorError::Rank {
        op: "update_factored",
        expected: 2,
        actual: g.rank(),
    })?;
    if rows != fm.rows() || cols != fm.cols() {
        return Err(TensorError::DimensionMismatch {
            op: "update_factored",
            left: vec![fm.rows(), fm.cols()],
            right: g.dims().to_vec(),
        });
    }
    let gd = g.data();
    let r = fm.r.data_mut();
    let mut col_acc = vec![0.0; cols];
    for i in 0..rows {
        let row = &gd[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for (a, &x) in col_acc.iter_mut().zip(row) {
            let sq = x * x;
            acc += sq;
            *a += sq;
        }
        r[i] = beta * r[i] + (1.0 - beta) * acc;
    }
    for (c, a) in fm.c.data_mut().iter_mut().zip(col_acc) {
        *c = beta * *c + (1.0 - beta) * a;
    }
    Ok(())
}

/// `v[i,j] = r[i]·c[j] / Σr`. A cold moment (`Σr = 0`) yields zeros and
/// `true` in the second slot.
pub fn reconstruct_v(fm: &FactoredMoment) -> (Tensor, bool) {
    let (rows, cols) = (fm.rows(), fm.cols());
    let total = fm.r.sum();
    let mut out = vec![0.0; rows * cols];
    if total == 0.0 {
        let v = Tensor::from_vec(vec![rows, cols], out).expect("non-empty shape");
        return (v, true);
    }
    let c = fm.c.data();
    for (i, &ri) in fm.r.data().iter().enumerate() {
        let scale = ri / total;
        for (o, &cj) in out[i * cols..(i + 1) * cols].iter_mut().zip(c) {
            *o = scale * cj;
        }
    }
    let v = Tensor::from_vec(vec![rows, cols], out).expect("non-empty shape");
    (v, false)
}

/// `û = u / max(1, rms(u)) · max(eps, rms(θ))`.
pub fn grouped_normalize(u: &Tensor, theta_prev: &Tensor, eps: f64) -> Result<Tensor> {
    if u.dims() != theta_prev.dims() {
        return Err(TensorError::DimensionMismatch {
            op: "grouped_normalize",
            left: u.dims().to_vec(),
            right: theta_prev.dims().to_vec(),
        });
    }
    let factor = eps.max(theta_prev.rms()) / u.rms().max(1.0);
    Ok(u.scale(factor))
}

fn precondition(g: &Tensor, v: &[f64], eps1: f64, mode: DenomMode) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(v)
        .map(|(&gi, &vi)| match mode {
            DenomMode::Sqrt => gi / (vi.sqrt() + eps1),
            DenomMode::Literal => gi / (vi + eps1),
        })
        .collect();
    Tensor::from_vec(g.dims().to_vec(), data).expect("shape taken from g")
}

fn apply(theta: &mut Tensor, u_hat: &Tensor, alpha: f64) {
    for (t, &u) in theta.data_mut().iter_mut().zip(u_hat.data()) {
        *t -= alpha * u;
    }
}

/// Second-moment store: factored for matrices, dense for vectors and scalars.
#[derive(Debug, Clone, PartialEq)]
pub enum SecondMoment {
    Factored(FactoredMoment),
    Full(Tensor),
}

impl SecondMoment {
    pub fn for_param(theta: &Tensor) -> Result<Self> {
        Ok(match matrix_view(theta.dims()) {
            Some((rows, cols)) => SecondMoment::Factored(FactoredMoment::zeros(rows, cols)?),
            None => SecondMoment::Full(theta.zeros_like()),
        })
    }

    pub fn numel(&self) -> usize {
        match self {
            SecondMoment::Factored(fm) => fm.numel(),
            SecondMoment::Full(v) => v.numel(),
        }
    }

    fn update(&mut self, g: &Tensor, beta: f64) -> Result<()> {
        match self {
            SecondMoment::Factored(fm) => update_factored(fm, g, beta),
            SecondMoment::Full(v) => {
                if v.dims() != g.dims() {
                    return Err(TensorError::DimensionMismatch {
                        op: "second_moment",
                        left: v.dims().to_vec(),
                        right: g.dims().to_vec(),
                    });
                }
                for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                    *vi = beta * *vi + (1.0 - beta) * gi * gi;
                }
                Ok(())
            }
        }
    }

    /// Dense estimate in row-major order of the parameter.
    fn dense(&self) -> Vec<f64> {
        match self {
            SecondMoment::Factored(fm) => reconstruct_v(fm).0.into_data(),
            SecondMoment::Full(v) => v.data().to_vec(),
        }
    }
}

/// Per-parameter AdaLomo state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaLomoState {
    pub moment: SecondMoment,
    pub t: u64,
}

impl AdaLomoState {
    pub fn new(theta: &Tensor) -> Result<Self> {
        Ok(AdaLomoState {
            moment: SecondMoment::for_param(theta)?,
            t: 0,
        })
    }
}

/// Hyperparameters shared by [`step_adalomo`] and [`step_adafactor`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactoredHyper {
    pub beta: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub mode: DenomMode,
}

impl Default for FactoredHyper {
    fn default() -> Self {
        FactoredHyper {
            beta: 0.9,
            eps1: 1e-6,
            eps2: 1e-3,
            mode: DenomMode::Sqrt,
        }
    }
}

/// One AdaLomo update for a single parameter. No bias correction; a cold
/// moment cannot divide by zero because `eps1 > 0`.
pub fn step_adalomo(
    theta: &mut Tensor,
    g: &Tensor,
    state: &mut AdaLomoState,
    alpha_t: f64,
    hp: &FactoredHyper,
) -> Result<()> {
    state.t += 1;
    state.moment.update(g, hp.beta)?;
    let v = state.moment.dense();
    let u = precondition(g, &v, hp.eps1, hp.mode);
    let u_hat = grouped_normalize(&u, theta, hp.eps2)?;
    apply(theta, &u_hat, alpha_t);
    Ok(())
}

/// Adafactor-style baseline: the same factored moment, decayed with a fixed
/// β₂ and bias-corrected, followed by the same grouped normalization.
pub fn step_adafactor(
    theta: &mut Tensor,
    g: &Tensor,
    state: &mut AdaLomoState,
    alpha_t: f64,
    hp: &FactoredHyper,
) -> Result<()> {
    state.t += 1;
    state.moment.update(g, hp.beta)?;
    let correction = 1.0 - hp.beta.powi(state.t as i32);
    let v: Vec<f64> = state.moment.dense().into_iter().map(|x| x / correction).collect();
    let u = precondition(g, &v, hp.eps1, DenomMode::Sqrt);
    let u_hat = grouped_normalize(&u, theta, hp.eps2)?;
    apply(theta, &u_hat, alpha_t);
    Ok(())
}
