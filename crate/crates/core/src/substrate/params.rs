use std::collections::BTreeMap;

use super::array::RealArray;
use crate::error::{GridError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: RealArray,
    pub grad: RealArray,
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: RealArray) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(GridError::Config(format!("duplicate parameter name {name}")));
        }
        let grad = RealArray::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
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

    pub fn value(&self, id: ParamId) -> &RealArray {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Overwrites every gradient with `grads`.
    pub fn set_grads(&mut self, grads: Gradients) -> Result<()> {
        if grads.0.len() != self.params.len() {
            return Err(GridError::Config("gradient count does not match parameter count".into()));
        }
        for (p, g) in self.params.iter_mut().zip(grads.0) {
            if g.shape() != p.value.shape() {
                return Err(GridError::Config(format!("gradient shape mismatch for {}", p.name)));
            }
            p.grad = g;
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.squared_norm()).sum::<f64>().sqrt()
    }
}

/// Gradients for every parameter of a store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<RealArray>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients(store.iter().map(|p| RealArray::zeros(p.value.shape())).collect())
    }

    pub fn get(&self, id: ParamId) -> &RealArray {
        &self.0[id.0]
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g.squared_norm()).sum::<f64>().sqrt()
    }
}
