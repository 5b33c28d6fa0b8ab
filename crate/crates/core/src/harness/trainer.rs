use crate::autograd::{clip_scale, ParamStore, Tape};
use crate::memtrack::{Category, MemoryLedger, MemoryReport};
use crate::models::Objective;
use crate::optim::{Method, Optimizer};

use super::config::MethodSpec;
use super::RunError;

/// Result of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    pub alpha: f64,
    /// Loss of the batch before the update.
    pub loss: f64,
    pub backward_passes: usize,
    /// Global-norm scale applied to the gradients, when clipping is on.
    pub clip_scale: Option<f64>,
}

/// Owns a model's parameters, optimizer and memory ledger, and runs
/// fused or full-backward training steps on it.
#[derive(Debug)]
pub struct Trainer<'m, O> {
    model: &'m O,
    store: ParamStore,
    opt: Optimizer,
    fused: bool,
    clip_threshold: Option<f64>,
    ledger: MemoryLedger,
    backward_passes: u64,
}

impl<'m, O: Objective> Trainer<'m, O> {
    pub fn new(model: &'m O, store: ParamStore, spec: &MethodSpec) -> Result<Self, RunError> {
        let opt = Optimizer::new(spec.method, spec.config, &store)?;
        let mut ledger = MemoryLedger::without_events();
        store.track(&mut ledger)?;
        opt.track(&store, &mut ledger)?;
        Ok(Trainer {
            model,
            store,
            clip_threshold: spec.config.clip_threshold,
            opt,
            fused: spec.fused,
            ledger,
            backward_passes: 0,
        })
    }

    pub fn with_ledger(mut self, ledger: MemoryLedger) -> Result<Self, RunError> {
        self.ledger = ledger;
        self.store.track(&mut self.ledger)?;
        self.opt.track(&self.store, &mut self.ledger)?;
        Ok(self)
    }

    pub fn method(&self) -> Method {
        self.opt.method()
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.opt
    }

    pub fn ledger(&self) -> &MemoryLedger {
        &self.ledger
    }

    pub fn backward_passes(&self) -> u64 {
        self.backward_passes
    }

    pub fn memory_report(&self) -> MemoryReport {
        MemoryReport::from_ledger(self.opt.method().name(), &self.ledger)
    }

    pub fn step(&mut self, batch: &O::Batch) -> Result<StepOutcome, RunError> {
        let alpha = self.opt.begin_step();
        let step = self.opt.step();
        let mut tape = Tape::new();
        let loss = self.model.loss(&mut tape, &self.store, batch)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(RunError::NonFinite {
                method: self.opt.method().name().to_string(),
                step,
                value: loss_value,
            });
        }
        let activations = self
            .ledger
            .record_alloc("activations", tape.activation_bytes().max(1), Category::Activation)?;

        let (opt, store) = (&mut self.opt, &mut self.store);
        let mut update = |id, g: &_| opt.update(id, store.get_mut(id).value_mut(), g);
        let scale = if self.fused {
            match self.clip_threshold {
                Some(th) => Some(tape.backward_fused_clipped(loss, th, Some(&mut self.ledger), update)?.0),
                None => {
                    tape.backward_fused(loss, Some(&mut self.ledger), update)?;
                    None
                }
            }
        } else {
            let grads = tape.backward_full(loss, Some(&mut self.ledger))?;
            let scale = self.clip_threshold.map(|th| clip_scale(grads.global_norm_sq().sqrt(), th));
            for (id, g) in grads.iter() {
                match scale {
                    Some(s) if s != 1.0 => update(id, &g.scale(s))?,
                    _ => update(id, g)?,
                }
            }
            grads.release(&mut self.ledger)?;
            scale
        };
        self.ledger.record_free(activations)?;
        let passes = tape.backward_passes();
        self.backward_passes += passes as u64;
        Ok(StepOutcome {
            step,
            alpha,
            loss: loss_value,
            backward_passes: passes,
            clip_scale: scale,
        })
    }
}
