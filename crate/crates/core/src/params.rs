//! Named trainable tensors and their text checkpoint form.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn expect(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Declares `name` as a trainable graph input.
    pub fn node(&self, g: &mut Graph, name: &str) -> NodeId {
        debug_assert!(self.tensors.contains_key(name), "unknown parameter {name}");
        g.trainable(name)
    }

    /// Declares `name` as a frozen input (gradients are not collected).
    pub fn frozen_node(&self, g: &mut Graph, name: &str) -> NodeId {
        g.input(name, false)
    }

    pub fn bind(&self, bindings: &mut Bindings) {
        for (name, t) in &self.tensors {
            bindings.insert(name.clone(), t.clone());
        }
    }

    /// Plain gradient-descent update for every parameter with a gradient.
    pub fn descend(&mut self, grads: &Gradients, lr: f64) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(g) = grads.get(name) {
                for (p, d) in t.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *p -= lr * d;
                }
            }
        }
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.tensors
            .iter()
            .map(|(name, t)| TensorRecord {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
                values: t.as_slice().to_vec(),
            })
            .collect()
    }

    pub fn from_records(records: Vec<TensorRecord>) -> Result<Self> {
        let mut set = ParamSet::new();
        for r in records {
            if r.shape[0] * r.shape[1] != r.values.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` declares shape {:?} but holds {} values",
                    r.name,
                    r.shape,
                    r.values.len()
                )));
            }
            set.insert(r.name, Tensor::new(r.shape[0], r.shape[1], r.values));
        }
        Ok(set)
    }
}

/// One tensor in a checkpoint document: name, shape and row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}
