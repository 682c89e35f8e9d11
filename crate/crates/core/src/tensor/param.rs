use std::collections::HashMap;

use super::{Float, Gradients, Tensor};
use crate::error::{contract_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter<T: Float = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

impl<T: Float> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            trainable: true,
        }
    }

    fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(contract_err!(
                "gradient for {} has shape {:?}, parameter is {:?}",
                self.name,
                g.shape(),
                self.value.shape()
            ));
        }
        match self.grad.as_mut() {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }
}

/// Ordered, name-addressable collection of parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Float = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(contract_err!("duplicate parameter name {name}"));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds the gradients recorded for parameter leaves into `grad`.
    /// Non-trainable parameters are skipped.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.param_grads() {
            let p = self
                .params
                .get_mut(id.0)
                .ok_or_else(|| contract_err!("gradient for unknown parameter id {}", id.0))?;
            if p.trainable {
                p.accumulate(g)?;
            }
        }
        Ok(())
    }

    /// Zeroes the gradient of every trainable parameter; frozen ones keep
    /// whatever they hold.
    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            match p.grad.as_mut() {
                Some(g) => g.data_mut().fill(T::ZERO),
                None => p.grad = Some(Tensor::zeros(p.value.shape().to_vec())),
            }
        }
    }
}
