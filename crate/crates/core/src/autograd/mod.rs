//! Reverse-mode differentiation over a recorded tape, with a fused mode that
//! hands each parameter gradient to a callback as soon as it is final.

mod backward;
mod param;
mod tape;

use thiserror::Error;

use crate::memtrack::LedgerError;
use crate::tensor::TensorError;

pub use backward::{clip_scale, BackwardStats, Gradients};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var, RMS_NORM_EPS};

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("loss must be a single-element tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    Consumed,
    #[error("gradient callback failed for parameter '{param}': {source}")]
    Callback {
        param: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("index {index} out of range for bound {bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, AutogradError>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memtrack::{Category, MemoryLedger};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = dims.iter().product();
        Tensor::from_vec(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_of_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));
        store.seal();
        let mut tape = Tape::new();
        let xv = tape.param(store.get(x));
        let loss = tape.square(xv);
        assert_eq!(tape.value(loss).item(), 9.0);
        let grads = tape.backward_full(loss, None).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn product_gradients_swap() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(2.0));
        let y = store.add("y", Tensor::scalar(5.0));
        let mut tape = Tape::new();
        let (xv, yv) = (tape.param(store.get(x)), tape.param(store.get(y)));
        let loss = tape.mul(xv, yv).unwrap();
        let grads = tape.backward_full(loss, None).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert_eq!(grads.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn identity_linear_layer_has_zero_mse() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let b = store.add("b", Tensor::zeros(vec![2]).unwrap());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        let wv = tape.param(store.get(w));
        let bv = tape.param(store.get(b));
        let h = tape.matmul(x, wv).unwrap();
        let y = tape.add_bias(h, bv).unwrap();
        let loss = tape.mse(y, Tensor::from_rows(&[&[1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2]).unwrap());
        let b = tape.square(a);
        assert!(matches!(
            tape.backward_full(b, None),
            Err(AutogradError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn second_backward_is_a_state_error() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.5));
        let mut tape = Tape::new();
        let xv = tape.param(store.get(x));
        let loss = tape.square(xv);
        tape.backward_full(loss, None).unwrap();
        assert!(matches!(tape.backward_full(loss, None), Err(AutogradError::Consumed)));
        let r = tape.backward_fused(loss, None, |_, _| Ok::<(), std::io::Error>(()));
        assert!(matches!(r, Err(AutogradError::Consumed)));
    }

    fn mlp(depth: usize, width: usize, seed: u64) -> (ParamStore, Vec<(ParamId, ParamId)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        for l in 0..depth {
            let w = store.add(format!("w{l}"), random(&[width, width], &mut rng));
            let b = store.add(format!("b{l}"), random(&[width], &mut rng));
            layers.push((w, b));
        }
        store.seal();
        (store, layers)
    }

    fn mlp_forward(tape: &mut Tape, store: &ParamStore, layers: &[(ParamId, ParamId)], x: Tensor) -> Var {
        let mut h = tape.constant(x);
        for (i, &(w, b)) in layers.iter().enumerate() {
            let wv = tape.param(store.get(w));
            let bv = tape.param(store.get(b));
            let z = tape.matmul(h, wv).unwrap();
            let z = tape.add_bias(z, bv).unwrap();
            h = if i + 1 < layers.len() { tape.tanh(z) } else { z };
        }
        tape.sum(h)
    }

    #[test]
    fn fused_matches_full_bitwise_and_fires_in_backprop_order() {
        let (store, layers) = mlp(3, 4, 1);
        let x = random(&[5, 4], &mut ChaCha8Rng::seed_from_u64(2));

        let mut tape = Tape::new();
        let loss = mlp_forward(&mut tape, &store, &layers, x.clone());
        let full = tape.backward_full(loss, None).unwrap();

        let mut tape = Tape::new();
        let loss = mlp_forward(&mut tape, &store, &layers, x);
        let mut seen = Vec::new();
        let stats = tape
            .backward_fused(loss, None, |id, g| {
                assert_eq!(g, full.get(id).unwrap());
                seen.push(id);
                Ok::<(), std::io::Error>(())
            })
            .unwrap();
        assert_eq!(seen, store.backprop_order());
        assert_eq!(stats.order, seen);
        assert_eq!(stats.peak_live_grads, 2);
        assert_eq!(full.order(), &seen[..]);
    }

    #[test]
    fn single_parameter_model_fires_once() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![1.0, -2.0]).unwrap());
        let mut tape = Tape::new();
        let xv = tape.param(store.get(x));
        let sq = tape.square(xv);
        let loss = tape.sum(sq);
        let mut calls = 0;
        let stats = tape
            .backward_fused(loss, None, |_, g| {
                calls += 1;
                assert_eq!(g.data(), &[2.0, -4.0]);
                Ok::<(), std::io::Error>(())
            })
            .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(stats.peak_live_grads, 1);
    }

    #[test]
    fn callback_error_names_the_parameter() {
        let (store, layers) = mlp(2, 3, 4);
        let mut tape = Tape::new();
        let loss = mlp_forward(&mut tape, &store, &layers, Tensor::ones(vec![1, 3]).unwrap());
        let err = tape
            .backward_fused(loss, None, |id, _| {
                if id == layers[1].0 {
                    Err(std::io::Error::other("boom"))
                } else {
                    Ok(())
                }
            })
            .unwrap_err();
        match err {
            AutogradError::Callback { param, .. } => assert_eq!(param, "w1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tied_parameter_fires_after_all_contributions() {
        // loss = sum((x W) W): W is used twice.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let w = store.add("w", random(&[3, 3], &mut rng));
        let build = |tape: &mut Tape| {
            let x = tape.constant(Tensor::ones(vec![2, 3]).unwrap());
            let wv = tape.param(store.get(w));
            let h = tape.matmul(x, wv).unwrap();
            let h = tape.matmul(h, wv).unwrap();
            tape.sum(h)
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape);
        let full = tape.backward_full(loss, None).unwrap();
        let mut tape = Tape::new();
        let loss = build(&mut tape);
        let mut calls = 0;
        tape.backward_fused(loss, None, |_, g| {
            calls += 1;
            assert_eq!(g, full.get(w).unwrap());
            Ok::<(), std::io::Error>(())
        })
        .unwrap();
        assert_eq!(calls, 1);
    }

    #[test]
    fn in_place_updates_do_not_perturb_upstream_gradients() {
        let (mut store, layers) = mlp(3, 4, 5);
        let x = random(&[2, 4], &mut ChaCha8Rng::seed_from_u64(6));
        let mut tape = Tape::new();
        let loss = mlp_forward(&mut tape, &store, &layers, x.clone());
        let full = tape.backward_full(loss, None).unwrap();

        let mut tape = Tape::new();
        let loss = mlp_forward(&mut tape, &store, &layers, x);
        tape.backward_fused(loss, None, |id, g| {
            assert_eq!(g, full.get(id).unwrap());
            store.get_mut(id).value_mut().scale_(100.0);
            Ok::<(), std::io::Error>(())
        })
        .unwrap();
    }

    #[test]
    fn ledger_sees_two_live_gradients_in_fused_mode() {
        let (store, layers) = mlp(5, 3, 9);
        let mut ledger = MemoryLedger::new();
        let mut tape = Tape::new();
        let loss = mlp_forward(&mut tape, &store, &layers, Tensor::ones(vec![2, 3]).unwrap());
        tape.backward_fused(loss, Some(&mut ledger), |_, _| Ok::<(), std::io::Error>(()))
            .unwrap();
        assert_eq!(ledger.peak_count(Category::Grad), 2);
        assert_eq!(ledger.live_bytes(Category::Grad), 0);
        assert_eq!(ledger.peak_bytes(Category::Grad), (9 + 3) * 8);

        let mut ledger = MemoryLedger::new();
        let mut tape = Tape::new();
        let loss = mlp_forward(&mut tape, &store, &layers, Tensor::ones(vec![2, 3]).unwrap());
        let grads = tape.backward_full(loss, Some(&mut ledger)).unwrap();
        assert_eq!(ledger.peak_count(Category::Grad), 10);
        grads.release(&mut ledger).unwrap();
        assert_eq!(ledger.live_bytes(Category::Grad), 0);
    }

    #[test]
    fn clipped_fused_pass_counts_two_sweeps() {
        let (store, layers) = mlp(2, 3, 10);
        let mut tape = Tape::new();
        let loss = mlp_forward(&mut tape, &store, &layers, Tensor::ones(vec![2, 3]).unwrap());
        let (scale, _) = tape
            .backward_fused_clipped(loss, 1e-3, None, |_, _| Ok::<(), std::io::Error>(()))
            .unwrap();
        assert!(scale < 1.0);
        assert_eq!(tape.backward_passes(), 2);
        assert_eq!(clip_scale(0.0, 1.0), 1.0);
        assert_eq!(clip_scale(10.0, 1.0), 0.1);
        assert_eq!(clip_scale(0.5, 1.0), 1.0);
    }

    #[test]
    fn out_of_range_gather_and_targets_fail() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::zeros(vec![3, 2]).unwrap());
        assert!(matches!(
            tape.gather(t, &[0, 3]),
            Err(AutogradError::IndexOutOfRange { index: 3, bound: 3 })
        ));
        assert!(matches!(
            tape.cross_entropy(t, &[0, 1, 2]),
            Err(AutogradError::IndexOutOfRange { index: 2, bound: 2 })
        ));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(vec![4, 7]).unwrap());
        let loss = tape.cross_entropy(l, &[0, 1, 2, 6]).unwrap();
        assert!((tape.value(loss).item() - 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn causal_attention_ignores_future_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = random(&[6, 4], &mut rng);
        let k = random(&[6, 4], &mut rng);
        let v = random(&[6, 4], &mut rng);
        let run = |k: &Tensor, v: &Tensor| {
            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
            let o = tape.causal_attention(qv, kv, vv, 2, 3, 2).unwrap();
            tape.value(o).clone()
        };
        let base = run(&k, &v);
        let (mut k2, mut v2) = (k.clone(), v.clone());
        // Perturb position 2 of the first sequence (row 2).
        for j in 0..4 {
            k2.data_mut()[2 * 4 + j] += 1.0;
            v2.data_mut()[2 * 4 + j] -= 1.0;
        }
        let moved = run(&k2, &v2);
        for r in [0, 1, 3, 4, 5] {
            for j in 0..4 {
                assert_eq!(base.at(r, j), moved.at(r, j), "row {r}");
            }
        }
    }
}
