//! Forward recording.
//!
//! Every primitive appends a node holding its output value plus whatever it
//! needs for the backward pass. Parameter leaves hold a copy of the parameter
//! value taken at registration, so parameters updated in place during a fused
//! backward never perturb gradients still flowing upstream.

use std::collections::HashMap;

use super::{AutogradError, ParamId, Parameter, Result};
use crate::tensor::{Tensor, TensorError};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub const RMS_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Tanh(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gather { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, gain: Var },
    CausalAttention(AttentionSpec),
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionSpec {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::Gather { table, .. } => vec![*table],
            Op::RmsNorm { x, gain } => vec![*x, *gain],
            Op::CausalAttention(s) => vec![s.q, s.k, s.v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub op: Op,
    pub value: Tensor,
    /// Op-specific forward results reused by backward (softmax rows, inverse RMS).
    pub saved: Option<Tensor>,
    pub requires_grad: bool,
}

/// A single-use record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) param_vars: HashMap<ParamId, Var>,
    pub(crate) param_names: HashMap<ParamId, String>,
    pub(crate) consumed: bool,
    pub(crate) passes: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Backward sweeps run on this tape so far.
    pub fn backward_passes(&self) -> usize {
        self.passes
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Bytes of recorded intermediate values (everything except leaves).
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Constant | Op::Param(_)))
            .map(|n| n.value.byte_size() + n.saved.as_ref().map_or(0, Tensor::byte_size))
            .sum()
    }

    fn push(&mut self, op: Op, value: Tensor, saved: Option<Tensor>) -> Var {
        let requires_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            saved,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a parameter. Registering the same parameter twice returns the same leaf.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.param_vars.get(&p.id()) {
            return v;
        }
        let v = self.push(Op::Param(p.id()), p.value().clone(), None);
        self.param_vars.insert(p.id(), v);
        self.param_names.insert(p.id(), p.name().to_string());
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out, None))
    }

    /// `x[m x n] + b[n]` with `b` added to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).matrix_dims("add_bias")?;
        let bias = self.value(b);
        if bias.dims() != [n] {
            return Err(TensorError::DimensionMismatch {
                op: "add_bias",
                left: self.value(x).dims().to_vec(),
                right: bias.dims().to_vec(),
            }
            .into());
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
        let out = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(Op::AddBias(x, b), out, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), out, None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), out, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), out, None))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push(Op::Scale(a, k), out, None)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map_with(|x| x + k);
        self.push(Op::AddScalar(a), out, None)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map_with(|x| x * x);
        self.push(Op::Square(a), out, None)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map_with(f64::exp);
        self.push(Op::Exp(a), out, None)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map_with(f64::tanh);
        self.push(Op::Tanh(a), out, None)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map_with(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(Op::Gelu(a), out, None)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out, None)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(Op::Mean(a), out, None)
    }

    pub fn reshape(&mut self, a: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(dims)?;
        Ok(self.push(Op::Reshape(a), out, None))
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let t = self.constant(target);
        let d = self.sub(pred, t)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Rows `ids` of a 2-D `table`, shape `[ids.len() x cols]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).matrix_dims("gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(AutogradError::IndexOutOfRange {
                index: bad,
                bound: rows,
            });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::from_vec(vec![ids.len(), cols], out)?;
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
            None,
        ))
    }

    /// Row-wise RMS normalization with a learned gain: `x / rms(x_row) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (m, n) = self.value(x).matrix_dims("rms_norm")?;
        let g = self.value(gain);
        if g.dims() != [n] {
            return Err(TensorError::DimensionMismatch {
                op: "rms_norm",
                left: self.value(x).dims().to_vec(),
                right: g.dims().to_vec(),
            }
            .into());
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut inv = vec![0.0; m];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let ms = row.iter().fold(0.0, |acc, &v| acc + v * v) / n as f64;
            let s = 1.0 / (ms + RMS_NORM_EPS).sqrt();
            inv[r] = s;
            for j in 0..n {
                out[r * n + j] = row[j] * s * g.data()[j];
            }
        }
        let out = Tensor::from_vec(vec![m, n], out)?;
        let inv = Tensor::from_vec(vec![m], inv)?;
        Ok(self.push(Op::RmsNorm { x, gain }, out, Some(inv)))
    }

    /// Multi-head causal self-attention over already-projected `q`, `k`, `v`,
    /// each `[batch*seq x d]` with rows ordered batch-major. Head `h` uses
    /// columns `h*d/heads .. (h+1)*d/heads`. Position `i` attends to `j <= i`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.value(q).matrix_dims("causal_attention")?;
        for other in [k, v] {
            if self.value(other).dims() != [rows, d] {
                return Err(TensorError::DimensionMismatch {
                    op: "causal_attention",
                    left: vec![rows, d],
                    right: self.value(other).dims().to_vec(),
                }
                .into());
            }
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(AutogradError::InvalidArgument(format!(
                "attention over [{rows} x {d}] with batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qs[(b * seq + i) * d + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &ks[(b * seq + j) * d + off..][..dh];
                        let s = qi.iter().zip(kj).fold(0.0, |acc, (a, c)| acc + a * c) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let prow = &mut probs[pbase + i * seq..][..seq];
                    let orow = &mut out[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let p = scores[j] / z;
                        prow[j] = p;
                        let vj = &vs[(b * seq + j) * d + off..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(vec![rows, d], out)?;
        let probs = Tensor::from_vec(vec![batch * heads, seq, seq], probs)?;
        let spec = AttentionSpec {
            q,
            k,
            v,
            batch,
            seq,
            heads,
        };
        Ok(self.push(Op::CausalAttention(spec), out, Some(probs)))
    }

    /// Mean softmax cross-entropy of `logits[n x vocab]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = self.value(logits).matrix_dims("cross_entropy")?;
        if targets.len() != n {
            return Err(AutogradError::InvalidArgument(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(AutogradError::IndexOutOfRange {
                index: bad,
                bound: vocab,
            });
        }
        let ls = self.value(logits).data();
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &ls[r * vocab..(r + 1) * vocab];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = 0.0;
            for (p, &l) in prow.iter_mut().zip(row) {
                *p = (l - max).exp();
                z += *p;
            }
            for p in prow.iter_mut() {
                *p /= z;
            }
            total += z.ln() + max - row[t];
        }
        let out = Tensor::scalar(total / n as f64);
        let probs = Tensor::from_vec(vec![n, vocab], probs)?;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            out,
            Some(probs),
        ))
    }
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
