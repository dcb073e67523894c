use std::ops::Index;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Identifier of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named collection of learnable tensors.
///
/// Tensors are reference counted so binding them onto a tape does not copy
/// their storage; mutation copies on write only while a tape still holds
/// a reference.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

/// Tape handles for every tensor of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(Arc::new(tensor));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter().map(|t| &**t))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| tape.leaf_shared(Arc::clone(t), requires_grad))
                .collect(),
        )
    }

    /// Collects gradients for every tensor, zeros where none flowed.
    pub fn gradients(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Tensor> {
        bound.0.iter().map(|&v| grads.take(v)).collect()
    }

    /// Replaces a tensor, keeping its name. Shapes must agree.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != tensor.shape() {
            return Err(Error::shape("ParamStore::set", cur.shape(), tensor.shape()));
        }
        self.tensors[id.0] = Arc::new(tensor);
        Ok(())
    }
}

/// Gaussian-initialised tensor with the given standard deviation.
pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Tensor {
    let shape = shape.into();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::from_parts(shape, data)
}

/// Uniform initialisation in `[-bound, bound]`.
pub fn uniform(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut impl Rng) -> Tensor {
    let shape = shape.into();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_parts(shape, data)
}
