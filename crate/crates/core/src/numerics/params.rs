use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub grad: Option<Tensor>,
}

/// Ordered, named collection of parameters. Insertion order is the
/// canonical order for serialization and gradient reduction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `scale · grads` into the stored gradients of trainable parameters.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.slots) {
            let (true, Some(g)) = (p.trainable, g) else { continue };
            match &mut p.grad {
                Some(acc) => acc.add_scaled(g, scale),
                None => p.grad = Some(g.scale(scale)),
            }
        }
    }

    /// Euclidean norm over all parameter values.
    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.tensor.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

/// Gradient per parameter slot, produced by one backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub(crate) slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(n: usize) -> Self {
        Gradients {
            slots: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        self.slots[id.0] = Some(t);
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    /// `self += scale · other`, slot by slot.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            let Some(b) = b else { continue };
            match a {
                Some(a) => a.add_scaled(b, scale),
                None => *a = Some(b.scale(scale)),
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.slots.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    /// Flattened gradient in parameter order; missing slots contribute zeros.
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_values());
        for (id, p) in store.iter() {
            match self.get(id) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat(0.0).take(p.tensor.len())),
            }
        }
        out
    }
}
