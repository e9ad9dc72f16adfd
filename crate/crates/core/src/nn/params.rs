use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::nn::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors. Names are stable and double as the
/// checkpoint keys.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        debug_assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Same names, shapes and order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn zeros_like(&self) -> Self {
        Self { names: self.names.clone(), values: self.values.iter().map(|v| Tensor::zeros(v.shape())).collect() }
    }

    /// Replace the value stored under `name`, checking its shape.
    pub fn set_by_name(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| shape_err!("unknown parameter {}", name))?;
        self.values[id.0].ensure_same_shape(&value, name)?;
        self.values[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(|v| v.cast()).collect() }
    }
}

/// Parameters bound into one graph, so that their gradients can be gathered
/// after the backward sweep.
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn new(n: usize) -> Self {
        Self { vars: alloc::vec![None; n] }
    }

    pub fn var<T: Scalar>(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = store.get(id).clone();
        let v = if trainable { g.variable(value) } else { g.constant(value) };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn var_of(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }
}
