use std::collections::HashMap;

use super::{Gradients, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    lookup: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// Registers a new parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value.with_requires_grad(true));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars over all parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.shape().numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    /// Overwrites the values of `id`, keeping its shape.
    pub fn set_values(&mut self, id: ParamId, data: Vec<S>) -> Result<()> {
        let shape = self.values[id.0].shape();
        let mut t = Tensor::from_vec(shape, data)?;
        t.set_requires_grad(true);
        self.values[id.0] = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Stores gradients from a backward pass on each parameter; parameters
    /// the loss never touched get an all-zero gradient.
    pub fn apply_grads(&mut self, grads: &Gradients<S>) -> Result<()> {
        for (i, t) in self.values.iter_mut().enumerate() {
            let g = match grads.param(ParamId(i)) {
                Some(g) => g.data().to_vec(),
                None => vec![S::zero(); t.shape().numel()],
            };
            t.set_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.values {
            t.clear_grad();
        }
    }

    /// Same parameters in another precision.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
            lookup: self.lookup.clone(),
        }
    }

    /// Shapes by name, useful for comparing two stores structurally.
    pub fn signature(&self) -> Vec<(String, Shape)> {
        self.iter().map(|(_, n, t)| (n.to_owned(), t.shape())).collect()
    }
}
