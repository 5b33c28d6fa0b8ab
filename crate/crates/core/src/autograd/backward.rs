//! Reverse sweeps over a recorded tape.
//!
//! All three entry points share one sweep, so the gradient delivered for a
//! parameter is bitwise the same whichever entry point is used. A parameter's
//! gradient is final once every consumer of its leaf has contributed; the
//! sweep counts pending contributions per leaf and reports the gradient the
//! moment the count reaches zero.

use std::collections::HashMap;

use super::tape::{gelu_grad, AttentionSpec, Op, Tape, Var};
use super::{AutogradError, ParamId, Result};
use crate::memtrack::{AllocId, Category, MemoryLedger};
use crate::tensor::Tensor;

/// Summary of one backward sweep.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BackwardStats {
    /// Parameters in the order their gradients became final.
    pub order: Vec<ParamId>,
    /// Largest number of parameter-gradient tensors held at once.
    pub peak_live_grads: usize,
}

/// Gradients retained by [`Tape::backward_full`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    order: Vec<ParamId>,
    grads: HashMap<ParamId, Tensor>,
    ledger_ids: Vec<AllocId>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Parameters in the order their gradients became final.
    pub fn order(&self) -> &[ParamId] {
        &self.order
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.order.iter().map(|id| (*id, &self.grads[id]))
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Sum of squared entries, accumulated parameter by parameter in backprop order.
    pub fn global_norm_sq(&self) -> f64 {
        self.iter().fold(0.0, |acc, (_, g)| acc + g.sum_sq())
    }

    /// Frees the ledger entries recorded when these gradients were produced.
    pub fn release(self, ledger: &mut MemoryLedger) -> Result<()> {
        for id in self.ledger_ids {
            ledger.record_free(id)?;
        }
        Ok(())
    }
}

/// What the sweep does with finished parameter gradients.
enum Residency {
    /// Keep every gradient alive until the caller is done.
    Retain,
    /// Free gradient `i-1` once gradient `i` has been handled.
    LagOne,
}

struct LiveGrad {
    ledger_id: Option<AllocId>,
}

impl Tape {
    /// Runs backward and returns every parameter gradient. Consumes the tape.
    pub fn backward_full(
        &mut self,
        loss: Var,
        mut ledger: Option<&mut MemoryLedger>,
    ) -> Result<Gradients> {
        self.check_fresh()?;
        let mut out = Gradients::default();
        let mut ids = Vec::new();
        self.sweep(loss, ledger.as_deref_mut(), Residency::Retain, &mut ids, |id, g| {
            out.order.push(id);
            out.grads.insert(id, g);
            Ok(())
        })?;
        out.ledger_ids = ids;
        self.consumed = true;
        Ok(out)
    }

    /// Runs backward, handing each parameter gradient to `on_grad` as soon as
    /// it is final, in backprop order. At most two parameter gradients are
    /// held at once. Consumes the tape.
    pub fn backward_fused<F, E>(
        &mut self,
        loss: Var,
        ledger: Option<&mut MemoryLedger>,
        mut on_grad: F,
    ) -> Result<BackwardStats>
    where
        F: FnMut(ParamId, &Tensor) -> std::result::Result<(), E>,
        E: std::error::Error + Send + Sync + 'static,
    {
        self.check_fresh()?;
        let names = self.param_names.clone();
        let mut unused = Vec::new();
        let stats = self.sweep(loss, ledger, Residency::LagOne, &mut unused, |id, g| {
            on_grad(id, &g).map_err(|e| AutogradError::Callback {
                param: names.get(&id).cloned().unwrap_or_else(|| id.to_string()),
                source: Box::new(e),
            })
        })?;
        self.consumed = true;
        Ok(stats)
    }

    /// First pass of two-pass global clipping: returns the squared global
    /// gradient norm, discarding each gradient after use. The tape stays usable.
    pub fn grad_norm_sq_pass(&mut self, loss: Var, ledger: Option<&mut MemoryLedger>) -> Result<f64> {
        self.check_fresh()?;
        let mut total = 0.0;
        let mut unused = Vec::new();
        self.sweep(loss, ledger, Residency::LagOne, &mut unused, |_, g| {
            total += g.sum_sq();
            Ok(())
        })?;
        Ok(total)
    }

    /// Fused backward with global gradient-norm clipping: one sweep to find the
    /// norm, a second that delivers `scale * g` with `scale = min(1, threshold / ||g||)`.
    /// Returns the scale.
    pub fn backward_fused_clipped<F, E>(
        &mut self,
        loss: Var,
        threshold: f64,
        mut ledger: Option<&mut MemoryLedger>,
        mut on_grad: F,
    ) -> Result<(f64, BackwardStats)>
    where
        F: FnMut(ParamId, &Tensor) -> std::result::Result<(), E>,
        E: std::error::Error + Send + Sync + 'static,
    {
        let norm = self.grad_norm_sq_pass(loss, ledger.as_deref_mut())?.sqrt();
        let scale = clip_scale(norm, threshold);
        let stats = self.backward_fused(loss, ledger, |id, g| on_grad(id, &g.scale(scale)))?;
        Ok((scale, stats))
    }

    fn check_fresh(&self) -> Result<()> {
        if self.consumed {
            Err(AutogradError::Consumed)
        } else {
            Ok(())
        }
    }

    fn sweep(
        &mut self,
        loss: Var,
        mut ledger: Option<&mut MemoryLedger>,
        residency: Residency,
        retained_ids: &mut Vec<AllocId>,
        mut on_ready: impl FnMut(ParamId, Tensor) -> Result<()>,
    ) -> Result<BackwardStats> {
        let loss_dims = self.value(loss).dims().to_vec();
        if loss_dims.iter().product::<usize>() != 1 {
            return Err(AutogradError::NonScalarLoss(loss_dims));
        }
        self.passes += 1;
        let n = loss.0 + 1;

        // Consumers on a path to the loss, counted per parameter leaf.
        let mut reachable = vec![false; n];
        let mut pending = vec![0usize; n];
        reachable[loss.0] = true;
        for i in (0..n).rev() {
            if !reachable[i] {
                continue;
            }
            for input in self.nodes[i].op.inputs() {
                if self.nodes[input.0].requires_grad {
                    reachable[input.0] = true;
                    if matches!(self.nodes[input.0].op, Op::Param(_)) {
                        pending[input.0] += 1;
                    }
                }
            }
        }

        let mut stats = BackwardStats::default();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut live: HashMap<usize, LiveGrad> = HashMap::new();
        let mut previous: Option<LiveGrad> = None;
        let mut live_count = 0usize;

        let seed = Tensor::ones(loss_dims)?;
        if let Op::Param(id) = self.nodes[loss.0].op {
            // Degenerate: the loss is itself a parameter.
            stats.peak_live_grads = 1;
            stats.order.push(id);
            on_ready(id, seed)?;
            return Ok(stats);
        }
        grads[loss.0] = Some(seed);

        for i in (0..n).rev() {
            if !reachable[i] || matches!(self.nodes[i].op, Op::Param(_) | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contribution) in self.vjp(i, &g)? {
                let idx = input.0;
                if !self.nodes[idx].requires_grad {
                    continue;
                }
                match &mut grads[idx] {
                    Some(acc) => acc.add_(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
                let Op::Param(pid) = self.nodes[idx].op else { continue };
                if let std::collections::hash_map::Entry::Vacant(e) = live.entry(idx) {
                    let ledger_id = match ledger.as_deref_mut() {
                        Some(l) => Some(l.record_alloc(
                            self.param_names[&pid].clone(),
                            grads[idx].as_ref().unwrap().byte_size(),
                            Category::Grad,
                        )?),
                        None => None,
                    };
                    e.insert(LiveGrad { ledger_id });
                    live_count += 1;
                    stats.peak_live_grads = stats.peak_live_grads.max(live_count);
                }
                pending[idx] -= 1;
                if pending[idx] == 0 {
                    let grad = grads[idx].take().unwrap();
                    stats.order.push(pid);
                    on_ready(pid, grad)?;
                    let done = live.remove(&idx).unwrap();
                    match residency {
                        Residency::Retain => retained_ids.extend(done.ledger_id),
                        Residency::LagOne => {
                            if let Some(prev) = previous.replace(done) {
                                release(&mut ledger, prev)?;
                                live_count -= 1;
                            }
                        }
                    }
                }
            }
        }
        if let Some(prev) = previous.take() {
            release(&mut ledger, prev)?;
        }
        Ok(stats)
    }

    /// Gradient contributions of node `i` to its inputs, given the gradient of its output.
    fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b) => {
                let mut r = Vec::with_capacity(2);
                if needs(*b) {
                    r.push((*b, val(*a).matmul_tn(g)?));
                }
                if needs(*a) {
                    r.push((*a, g.matmul_nt(val(*b))?));
                }
                r
            }
            Op::AddBias(x, b) => {
                let n = val(*b).numel();
                vec![(*b, g.col_sums()?.reshape(vec![n])?), (*x, g.clone())]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, k) => vec![(*a, g.scale(*k))],
            Op::AddScalar(a) | Op::Reshape(a) => vec![(*a, g.reshape(val(*a).dims().to_vec())?)],
            Op::Square(a) => vec![(*a, g.mul(&val(*a).scale(2.0))?)],
            Op::Exp(a) => vec![(*a, g.mul(&node.value)?)],
            Op::Tanh(a) => vec![(*a, g.mul(&node.value.map_with(|y| 1.0 - y * y))?)],
            Op::Gelu(a) => vec![(*a, g.mul(&val(*a).map_with(gelu_grad))?)],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).dims().to_vec(), g.item())?)],
            Op::Mean(a) => {
                let x = val(*a);
                vec![(*a, Tensor::full(x.dims().to_vec(), g.item() / x.numel() as f64)?)]
            }
            Op::Gather { table, ids } => {
                let t = val(*table);
                let (_, cols) = t.matrix_dims("gather")?;
                let mut d = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * cols..(r + 1) * cols];
                    for (o, &s) in d[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                        *o += s;
                    }
                }
                vec![(*table, Tensor::from_vec(t.dims().to_vec(), d)?)]
            }
            Op::RmsNorm { x, gain } => rms_norm_vjp(val(*x), val(*gain), node.saved.as_ref().unwrap(), g, *x, *gain)?,
            Op::CausalAttention(spec) => {
                attention_vjp(spec, val(spec.q), val(spec.k), val(spec.v), node.saved.as_ref().unwrap(), g)?
            }
            Op::CrossEntropy { logits, targets } => {
                let probs = node.saved.as_ref().unwrap();
                let (n, vocab) = probs.matrix_dims("cross_entropy")?;
                let k = g.item() / n as f64;
                let mut d = probs.data().to_vec();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * vocab + t] -= 1.0;
                }
                for x in &mut d {
                    *x *= k;
                }
                vec![(*logits, Tensor::from_vec(vec![n, vocab], d)?)]
            }
        };
        Ok(out)
    }
}

fn release(ledger: &mut Option<&mut MemoryLedger>, g: LiveGrad) -> Result<()> {
    if let (Some(l), Some(id)) = (ledger.as_deref_mut(), g.ledger_id) {
        l.record_free(id)?;
    }
    Ok(())
}

/// `min(1, threshold / norm)`, and 1 for a zero norm.
pub fn clip_scale(norm: f64, threshold: f64) -> f64 {
    if norm > threshold && norm > 0.0 {
        threshold / norm
    } else {
        1.0
    }
}

fn rms_norm_vjp(
    x: &Tensor,
    gain: &Tensor,
    inv: &Tensor,
    g: &Tensor,
    xv: Var,
    gv: Var,
) -> Result<Vec<(Var, Tensor)>> {
    let (m, n) = x.matrix_dims("rms_norm")?;
    let (xs, gs, dy) = (x.data(), gain.data(), g.data());
    let mut dx = vec![0.0; m * n];
    let mut dgain = vec![0.0; n];
    for r in 0..m {
        let s = inv.data()[r];
        let row = &xs[r * n..(r + 1) * n];
        let dyr = &dy[r * n..(r + 1) * n];
        let mut dot = 0.0;
        for j in 0..n {
            dgain[j] += dyr[j] * row[j] * s;
            dot += dyr[j] * gs[j] * row[j];
        }
        let k = s * s * s * dot / n as f64;
        for j in 0..n {
            dx[r * n + j] = s * dyr[j] * gs[j] - row[j] * k;
        }
    }
    Ok(vec![
        (gv, Tensor::from_vec(vec![n], dgain)?),
        (xv, Tensor::from_vec(vec![m, n], dx)?),
    ])
}

fn attention_vjp(
    spec: &AttentionSpec,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    g: &Tensor,
) -> Result<Vec<(Var, Tensor)>> {
    let AttentionSpec {
        batch, seq, heads, ..
    } = *spec;
    let (rows, d) = q.matrix_dims("causal_attention")?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qs, ks, vs, ps, dout) = (q.data(), k.data(), v.data(), probs.data(), g.data());
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            let pbase = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let prow = &ps[pbase + i * seq..][..seq];
                let doi = &dout[(b * seq + i) * d + off..][..dh];
                let mut dot = 0.0;
                for j in 0..=i {
                    let vj = &vs[(b * seq + j) * d + off..][..dh];
                    dp[j] = doi.iter().zip(vj).fold(0.0, |acc, (a, c)| acc + a * c);
                    dot += prow[j] * dp[j];
                    let dvj = &mut dv[(b * seq + j) * d + off..][..dh];
                    for (o, &x) in dvj.iter_mut().zip(doi) {
                        *o += prow[j] * x;
                    }
                }
                let qi = &qs[(b * seq + i) * d + off..][..dh];
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    let kj = &ks[(b * seq + j) * d + off..][..dh];
                    let dqi = &mut dq[(b * seq + i) * d + off..][..dh];
                    for (o, &x) in dqi.iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    let dkj = &mut dk[(b * seq + j) * d + off..][..dh];
                    for (o, &x) in dkj.iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
    }
    // Reverse of recording order keeps accumulation deterministic for shared inputs.
    Ok(vec![
        (spec.v, Tensor::from_vec(vec![rows, d], dv)?),
        (spec.k, Tensor::from_vec(vec![rows, d], dk)?),
        (spec.q, Tensor::from_vec(vec![rows, d], dq)?),
    ])
}
