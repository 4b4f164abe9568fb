//! Named parameter storage shared by both model families.

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Buffers (batch-norm running statistics) are saved but never optimised.
    pub trainable: bool,
}

/// Ordered collection of named tensors. Indices are stable for the life of
/// a model and are what model code uses to find its weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T: Real> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.push(name.into(), tensor, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.push(name.into(), tensor, false)
    }

    fn push(&mut self, name: String, tensor: Tensor<T>, trainable: bool) -> usize {
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            tensor,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.params[idx].tensor
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.params[idx].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.numel()).sum()
    }

    /// Binds every tensor into `g`: trainable ones as differentiable leaves,
    /// buffers as constants. The returned vars are indexed like the set.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    g.param(p.tensor.clone())
                } else {
                    g.constant(p.tensor.clone())
                }
            })
            .collect()
    }

    /// Moves gradients for the bound vars into each tensor's `grad` field.
    /// Parameters that did not influence the output get zero gradients.
    pub fn collect_grads(&mut self, grads: &mut Gradients<T>, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if !p.trainable {
                p.tensor.grad = None;
                continue;
            }
            let g = grads.take(v).unwrap_or_else(|| vec![T::zero(); p.tensor.numel()]);
            p.tensor.grad = Some(g);
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.grad = None);
    }

    /// Replaces the tensor called `name`, requiring an identical shape.
    pub fn assign(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter `{name}`")))?;
        let current = &mut self.params[idx].tensor;
        if current.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "assign",
                left: current.shape().to_vec(),
                right: tensor.shape().to_vec(),
            });
        }
        *current = tensor;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}
