use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Names are unique and define the identity used
/// when parameters are shared between models or written to checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.id(name).is_some() {
            bail!(Config, "duplicate parameter name {name}");
        }
        self.names.push(name.to_string());
        self.tensors.push(tensor.requiring_grad());
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Resets every gradient slot to zeros.
    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            let n = t.len();
            match t.grad_mut() {
                Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                None => t.set_grad(Some(vec![0.0; n])),
            }
        }
    }

    /// Drops all gradient slots.
    pub fn clear_grad(&mut self) {
        for t in &mut self.tensors {
            t.set_grad(None);
        }
    }

    pub(crate) fn grad_slot(&mut self, id: ParamId) -> &mut Vec<f64> {
        let t = &mut self.tensors[id.0];
        if t.grad().is_none() {
            let n = t.len();
            t.set_grad(Some(vec![0.0; n]));
        }
        t.grad_mut().expect("grad slot just initialised")
    }

    /// Copies the values of every parameter that exists under the same name
    /// and shape in `other`. Returns the number of parameters copied.
    pub fn copy_shared_from(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if let Some(src) = other.id(name).map(|id| other.get(id)) {
                if src.shape() == t.shape() {
                    t.values_mut().copy_from_slice(src.values());
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Overwrites all values from a store with identical names and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            bail!(
                Validation,
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            );
        }
        for (i, t) in self.tensors.iter_mut().enumerate() {
            let src = &other.tensors[i];
            if other.names[i] != self.names[i] || src.shape() != t.shape() {
                bail!(
                    Validation,
                    "parameter {} ({:?}) does not match {} ({:?})",
                    self.names[i],
                    t.shape(),
                    other.names[i],
                    src.shape()
                );
            }
            t.values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }
}
