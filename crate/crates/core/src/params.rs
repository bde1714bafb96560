//! Named parameter store.
//!
//! Parameters live outside any tape as plain tensors; each forward pass binds
//! them onto a fresh tape as `requires_grad` leaves. Enumeration order is the
//! insertion order, which is fixed by the model construction sequence, so
//! optimizer updates and gradient reports are deterministic.

use std::collections::HashMap;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamStore {
    order: Vec<String>,
    values: HashMap<String, Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            order: Vec::new(),
            values: HashMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.values.contains_key(&path) {
            return Err(Error::config(format!("duplicate parameter path {path}")));
        }
        self.order.push(path.clone());
        self.values.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.values.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.values.get_mut(path)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn numel(&self) -> usize {
        self.order.iter().map(|p| self.values[p].numel()).sum()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.order.iter().map(|p| (p.as_str(), &self.values[p]))
    }

    /// Register every parameter on `tape` as a requires-grad leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        let mut ids = HashMap::with_capacity(self.order.len());
        for path in &self.order {
            let id = tape.leaf(self.values[path].clone(), true);
            ids.insert(path.clone(), id);
        }
        ParamBinding {
            order: self.order.clone(),
            ids,
        }
    }
}

/// Tape node ids for one bound forward pass.
pub struct ParamBinding {
    order: Vec<String>,
    ids: HashMap<String, NodeId>,
}

impl ParamBinding {
    pub fn id(&self, path: &str) -> NodeId {
        *self
            .ids
            .get(path)
            .unwrap_or_else(|| panic!("unbound parameter path {path}"))
    }

    /// Gradients in store order; zeros where backward never reached.
    pub fn gradients(&self, tape: &Tape) -> Vec<(String, Tensor)> {
        self.order
            .iter()
            .map(|p| (p.clone(), tape.grad(self.ids[p])))
            .collect()
    }
}
