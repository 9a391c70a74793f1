use std::collections::HashMap;

use super::{ModelError, Result};
use crate::scalar::Real;
use crate::tensor::{Grads, Tape, Tensor, Var};

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn bind<'t, 'p>(&'p self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, 'p, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { store: self, tape, vars }
    }
}

/// A parameter store placed on one tape.
#[derive(Debug)]
pub struct Bound<'t, 'p, T> {
    store: &'p ParamStore<T>,
    tape: &'t Tape<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, '_, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.store
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ModelError::Config(format!("missing parameter `{name}`")))
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Gradients in store order (zeros for unused parameters).
    pub fn gradients(&self, grads: &Grads<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| grads.tensor(v)).collect()
    }
}
