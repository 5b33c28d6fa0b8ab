//! Differentiable models: the two-basin surface, tanh MLPs, and a tiny
//! causal transformer LM, plus evaluation metrics.

mod f2d;
mod mlp;
mod transformer;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::autograd::{ParamStore, Result, Tape, Var};
use crate::tensor::Tensor;

pub use f2d::{f2d_eval, f2d_grad, f2d_minima, f2d_on_tape, Minima, Minimum};
pub use mlp::{Mlp, RegressionBatch};
pub use transformer::{LmBatch, TinyTransformerLM, TransformerConfig};

/// A model that records a scalar loss for one batch on a tape.
pub trait Objective {
    type Batch;

    fn loss(&self, tape: &mut Tape, store: &ParamStore, batch: &Self::Batch) -> Result<Var>;
}

pub(crate) fn init_normal<R: Rng>(dims: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite positive std");
    let n = dims.iter().product();
    Tensor::from_vec(dims.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("positive dims")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalMetrics {
    /// Mean cross-entropy in nats per token.
    pub loss: f64,
    pub perplexity: f64,
    pub accuracy: f64,
}

impl EvalMetrics {
    pub fn from_loss(loss: f64, accuracy: f64) -> Self {
        EvalMetrics {
            loss,
            perplexity: loss.exp(),
            accuracy,
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Token-weighted loss and next-token accuracy over `batches`.
pub fn evaluate_lm(model: &TinyTransformerLM, store: &ParamStore, batches: &[LmBatch]) -> Result<EvalMetrics> {
    let vocab = model.config().vocab;
    let (mut loss_sum, mut correct, mut tokens) = (0.0, 0usize, 0usize);
    for b in batches {
        let mut tape = Tape::new();
        let (loss, logits) = model.loss_and_logits(&mut tape, store, b)?;
        let n = b.targets.len();
        loss_sum += tape.value(loss).item() * n as f64;
        let l = tape.value(logits).data();
        correct += b
            .targets
            .iter()
            .enumerate()
            .filter(|&(r, &t)| argmax(&l[r * vocab..(r + 1) * vocab]) == t)
            .count();
        tokens += n;
    }
    if tokens == 0 {
        return Err(crate::autograd::AutogradError::InvalidArgument("no evaluation tokens".into()));
    }
    Ok(EvalMetrics::from_loss(loss_sum / tokens as f64, correct as f64 / tokens as f64))
}

/// L2 norm of every parameter gradient for one batch, in registration order.
/// Parameters the loss does not reach report 0.
pub fn per_layer_grad_norms<O: Objective>(
    model: &O,
    store: &ParamStore,
    batch: &O::Batch,
) -> Result<Vec<(String, f64)>> {
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, store, batch)?;
    let grads = tape.backward_full(loss, None)?;
    Ok(store
        .iter()
        .map(|p| {
            let norm = grads.get(p.id()).map_or(0.0, |g| g.norm_l2());
            (p.name().to_string(), norm)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_lm(store: &mut ParamStore, seed: u64) -> TinyTransformerLM {
        let cfg = TransformerConfig {
            vocab: 13,
            d_model: 8,
            layers: 1,
            heads: 2,
            context: 8,
            d_ff: 16,
            init_std: 0.2,
        };
        TinyTransformerLM::new(cfg, store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn batch(rng: &mut ChaCha8Rng, b: usize, t: usize) -> LmBatch {
        let toks: Vec<usize> = (0..b * (t + 1)).map(|_| rng.random_range(0..13)).collect();
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for s in toks.chunks(t + 1) {
            inputs.extend_from_slice(&s[..t]);
            targets.extend_from_slice(&s[1..]);
        }
        LmBatch { inputs, targets, batch: b, seq: t }
    }

    #[test]
    fn perplexity_is_exp_loss() {
        let m = EvalMetrics::from_loss(1.7, 0.3);
        assert!((m.perplexity - 1.7f64.exp()).abs() <= 1e-12 * m.perplexity);
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let mut store = ParamStore::new();
        let model = small_lm(&mut store, 0);
        let head = store.find("head").unwrap().id();
        store.get_mut(head).value_mut().scale_(0.0);
        let b = batch(&mut ChaCha8Rng::seed_from_u64(1), 2, 5);
        let m = evaluate_lm(&model, &store, &[b]).unwrap();
        assert!((m.loss - 13f64.ln()).abs() < 1e-12);
        assert!((m.perplexity - 13.0).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&m.accuracy));
    }

    #[test]
    fn loss_invariant_under_sequence_permutation() {
        let mut store = ParamStore::new();
        let model = small_lm(&mut store, 3);
        let b = batch(&mut ChaCha8Rng::seed_from_u64(4), 3, 6);
        let mut swapped = b.clone();
        for v in [&mut swapped.inputs, &mut swapped.targets] {
            let tail = v.split_off(6);
            let head = std::mem::replace(v, tail);
            v.extend(head);
        }
        let a = evaluate_lm(&model, &store, &[b]).unwrap();
        let c = evaluate_lm(&model, &store, &[swapped]).unwrap();
        assert!((a.loss - c.loss).abs() < 1e-12);
        assert_eq!(a.accuracy, c.accuracy);
    }

    #[test]
    fn grad_norms_match_full_backward_and_are_deterministic() {
        let mut store = ParamStore::new();
        let model = small_lm(&mut store, 5);
        let b = batch(&mut ChaCha8Rng::seed_from_u64(6), 2, 4);
        let norms = per_layer_grad_norms(&model, &store, &b).unwrap();
        assert_eq!(norms.len(), store.len());
        assert_eq!(norms[0].0, "tok_emb");

        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &store, &b).unwrap();
        let grads = tape.backward_full(loss, None).unwrap();
        for (p, (name, n)) in store.iter().zip(&norms) {
            assert_eq!(p.name(), name);
            let sq: f64 = grads.get(p.id()).unwrap().data().iter().map(|x| x * x).sum();
            assert!((sq.sqrt() - n).abs() <= 1e-12 * n.max(1e-300));
        }
        assert_eq!(norms, per_layer_grad_norms(&model, &store, &b).unwrap());
    }

    #[test]
    fn zero_head_blocks_flow_to_embeddings() {
        let mut store = ParamStore::new();
        let model = small_lm(&mut store, 7);
        let head = store.find("head").unwrap().id();
        store.get_mut(head).value_mut().scale_(0.0);
        let b = batch(&mut ChaCha8Rng::seed_from_u64(8), 1, 4);
        let norms = per_layer_grad_norms(&model, &store, &b).unwrap();
        let get = |n: &str| norms.iter().find(|(k, _)| k == n).unwrap().1;
        assert!(get("head") > 0.0);
        assert_eq!(get("tok_emb"), 0.0);
    }

    #[test]
    fn single_batch_overfits_with_adam() {
        use crate::optim::{Method, Optimizer, OptimizerConfig};
        let mut store = ParamStore::new();
        let model = small_lm(&mut store, 9);
        let b = batch(&mut ChaCha8Rng::seed_from_u64(10), 2, 6);
        let cfg = OptimizerConfig { alpha: 0.02, weight_decay: 0.0, ..Default::default() };
        let mut opt = Optimizer::new(Method::Adam, cfg, &store).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, &store, &b).unwrap();
            last = tape.value(loss).item();
            let grads = tape.backward_full(loss, None).unwrap();
            opt.begin_step();
            for (id, g) in grads.iter() {
                opt.update(id, store.get_mut(id).value_mut(), g).unwrap();
            }
        }
        assert!(last < 0.1, "loss {last}");
    }
}
