use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    /// Appends a parameter and returns its position.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.entries.push((name.into(), tensor.with_grad()));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn at(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf. The
    /// returned handles are in insertion order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| {
                let mut leaf = t.clone();
                leaf.grad = None;
                leaf.requires_grad = true;
                tape.var(leaf)
            })
            .collect()
    }

    /// Adds the tape's gradients into each parameter's `grad`. Parameters the
    /// loss did not reach receive an explicit zero gradient.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, vars: &[Var]) {
        for ((_, t), &v) in self.entries.iter_mut().zip(vars) {
            let n = t.numel();
            let acc = t.grad.get_or_insert_with(|| vec![T::zero(); n]);
            if let Some(g) = tape.grad(v) {
                for (a, &gv) in acc.iter_mut().zip(g) {
                    *a += gv;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.grad = None;
        }
    }

    pub fn grad_norm(&self) -> T {
        self.entries
            .iter()
            .filter_map(|(_, t)| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub(crate) fn require_grads(&self) -> Result<()> {
        for (name, t) in &self.entries {
            if t.requires_grad && t.grad.is_none() {
                return Err(Error::MissingGrad(name.clone()));
            }
        }
        Ok(())
    }
}
