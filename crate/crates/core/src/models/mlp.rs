use rand::Rng;

use super::{init_normal, Objective};
use crate::autograd::{AutogradError, ParamId, ParamStore, Result, Tape, Var};
use crate::tensor::Tensor;

/// Fully connected network with tanh hidden layers and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<(ParamId, ParamId)>,
}

/// Regression batch: inputs `[n x in]`, targets `[n x out]`.
#[derive(Debug, Clone)]
pub struct RegressionBatch {
    pub x: Tensor,
    pub y: Tensor,
}

impl Mlp {
    /// Registers `w{i}`, `b{i}` for each layer in forward order and seals the store.
    pub fn new<R: Rng>(
        widths: &[usize],
        init_std: f64,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(AutogradError::InvalidArgument(format!(
                "MLP needs at least two positive widths, got {widths:?}"
            )));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = store.add(format!("w{i}"), init_normal(&[w[0], w[1]], init_std, rng));
                let bias = store.add(format!("b{i}"), Tensor::zeros(vec![w[1]]).expect("positive width"));
                (weight, bias)
            })
            .collect();
        store.seal();
        Ok(Mlp {
            widths: widths.to_vec(),
            layers,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<Var> {
        let mut h = tape.constant(x.clone());
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store.get(w));
            let bv = tape.param(store.get(b));
            let z = tape.matmul(h, wv)?;
            h = tape.add_bias(z, bv)?;
            if i != last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}

impl Objective for Mlp {
    type Batch = RegressionBatch;

    fn loss(&self, tape: &mut Tape, store: &ParamStore, batch: &RegressionBatch) -> Result<Var> {
        let out = self.forward(tape, store, &batch.x)?;
        tape.mse(out, batch.y.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_count_and_order() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&[3, 5, 2], 0.1, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(mlp.param_count(), 3 * 5 + 5 + 5 * 2 + 2);
        assert_eq!(store.numel(), mlp.param_count());
        let names: Vec<_> = store.backprop_order().iter().map(|&id| store.get(id).name().to_string()).collect();
        assert_eq!(names, ["b1", "w1", "b0", "w0"]);
    }

    #[test]
    fn rejects_degenerate_widths() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Mlp::new(&[3], 0.1, &mut store, &mut rng).is_err());
        assert!(Mlp::new(&[3, 0, 1], 0.1, &mut store, &mut rng).is_err());
    }

    #[test]
    fn output_shape() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&[3, 4, 2], 0.1, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let out = mlp.forward(&mut tape, &store, &Tensor::zeros(vec![7, 3]).unwrap()).unwrap();
        assert_eq!(tape.value(out).dims(), &[7, 2]);
    }
}
