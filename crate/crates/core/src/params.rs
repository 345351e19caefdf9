//! Named parameter storage and per-step binding onto a tape.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Optimizer routing for a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Base,
    Proxy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
    pub group: Group,
}

/// One row of a parameter inventory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Insertion-ordered table of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool, group: Group) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.entries.insert(name, Param { tensor, trainable, group });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.entries.iter_mut() {
            p.trainable = pred(name);
        }
    }

    pub fn inventory(&self) -> Vec<ParamInfo> {
        self.entries
            .iter()
            .map(|(name, p)| ParamInfo {
                name: name.clone(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect()
    }

    /// SHA-256 over names, shapes and raw values of every entry under `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(p.tensor.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// A tape plus lazily bound parameters for one forward/backward pass.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
    order: Vec<(String, Var)>,
    grad_enabled: bool,
}

impl<'a> Graph<'a> {
    /// Binds parameters with their trainable flags as gradient participation.
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_grad(store, true)
    }

    /// Binds every parameter as a constant.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::with_grad(store, false)
    }

    fn with_grad(store: &'a ParamStore, grad_enabled: bool) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            order: Vec::new(),
            grad_enabled,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Leaf for the named parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.store.get(name)?;
        let v = self.tape.leaf(p.tensor.clone(), self.grad_enabled && p.trainable)?;
        self.bound.insert(name.to_string(), v);
        self.order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.tape.constant(t)
    }

    /// Gradients of the trainable parameters touched by this graph, in binding order.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(String, Tensor)> {
        self.order
            .iter()
            .filter_map(|(name, v)| grads.take(*v).map(|g| (name.clone(), g)))
            .collect()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|(n, _)| n.as_str())
    }
}
