use std::fmt;

use crate::memtrack::{Category, LedgerError, MemoryLedger};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    id: ParamId,
    name: String,
    value: Tensor,
    backprop_index: usize,
}

impl Parameter {
    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// In-place access for optimizer updates. The shape must not change.
    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    /// Position in the order gradients become final during backward; 0 is first.
    pub fn backprop_index(&self) -> usize {
        self.backprop_index
    }
}

/// The parameters of one model. `ParamId(i)` is the i-th registered parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Models register in forward order and call
    /// [`ParamStore::seal`] once all parameters exist.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            id,
            name: name.into(),
            value,
            backprop_index: 0,
        });
        id
    }

    /// Assigns backprop indices as the reverse of registration order.
    pub fn seal(&mut self) {
        let n = self.params.len();
        for p in &mut self.params {
            p.backprop_index = n - 1 - p.id.0;
        }
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.iter().map(|p| p.id)
    }

    /// Ids sorted by backprop index.
    pub fn backprop_order(&self) -> Vec<ParamId> {
        let mut ids: Vec<&Parameter> = self.params.iter().collect();
        ids.sort_by_key(|p| p.backprop_index);
        ids.into_iter().map(|p| p.id).collect()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Records every parameter tensor in `ledger` under [`Category::Param`].
    pub fn track(&self, ledger: &mut MemoryLedger) -> Result<(), LedgerError> {
        for p in &self.params {
            ledger.record_alloc(p.name.clone(), p.value.byte_size(), Category::Param)?;
        }
        Ok(())
    }

    /// Largest absolute elementwise difference against another store with the same layout.
    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()))
            .fold(0.0, |acc: f64, (x, y)| acc.max((x - y).abs()))
    }
}
