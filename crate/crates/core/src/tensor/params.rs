use super::dense::Tensor;
use super::graph::{Graph, Var};
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered, named parameter store. Order is the checkpoint order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T = f32> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Param<T> {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param<T> {
        &mut self.params[index]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Inserts every parameter into `g` as a trainable leaf, in order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    /// Inserts every parameter as a constant (no gradients, e.g. a frozen teacher).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.value.clone())).collect()
    }

    /// Adds the graph gradients of `vars` (from [`ParamSet::bind`]) into `grad`.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, vars: &[Var]) {
        assert_eq!(vars.len(), self.params.len());
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(grad) = g.grad(v) {
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .for_each(|(a, &b)| *a += b);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }

    /// Replaces values by name; every name must exist with an identical shape.
    pub fn load_values(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (name, value) in tensors {
            let idx = self
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name:?}")))?;
            let p = &mut self.params[idx];
            if p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, model expects {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(())
    }
}
