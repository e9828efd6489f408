//! Named parameter collection shared by the model, the optimizer and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the tracker a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleTag {
    Backbone,
    Head,
    Dcp,
    Gfa,
}

impl ModuleTag {
    pub const ALL: [ModuleTag; 4] = [
        ModuleTag::Backbone,
        ModuleTag::Head,
        ModuleTag::Dcp,
        ModuleTag::Gfa,
    ];

    /// Backbone and head make up the foundation tracker; dcp and gfa are prompt modules.
    pub fn is_foundation(self) -> bool {
        matches!(self, ModuleTag::Backbone | ModuleTag::Head)
    }
}

impl fmt::Display for ModuleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModuleTag::Backbone => "backbone",
            ModuleTag::Head => "head",
            ModuleTag::Dcp => "dcp",
            ModuleTag::Gfa => "gfa",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tag: ModuleTag,
    pub frozen: bool,
    pub value: Tensor,
}

/// Ordered `name -> parameter` map. Insertion order is the canonical order used
/// by checkpoints and by every iteration over the collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tag: ModuleTag, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let idx = self.params.len();
        self.index.insert(name.clone(), idx);
        self.params.push(Param {
            name,
            tag,
            frozen: false,
            value,
        });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn by_index(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = self.index_of(name)?;
        Some(&mut self.params[idx].value)
    }

    pub(crate) fn by_index_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn contains_tag(&self, tag: ModuleTag) -> bool {
        self.params.iter().any(|p| p.tag == tag)
    }

    /// Sets `frozen` on every parameter according to `pred`.
    pub fn set_frozen_where(&mut self, pred: impl Fn(&Param) -> bool) {
        for p in &mut self.params {
            p.frozen = pred(p);
        }
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Keeps only parameters matching `pred`, preserving order.
    pub fn retain(&mut self, pred: impl Fn(&Param) -> bool) {
        self.params.retain(|p| pred(p));
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }
}

/// Gradients keyed by parameter index in a [`ModelParams`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap {
    grads: BTreeMap<usize, Vec<f64>>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, idx: usize) -> Option<&[f64]> {
        self.grads.get(&idx).map(|g| g.as_slice())
    }

    pub fn insert(&mut self, idx: usize, grad: Vec<f64>) {
        self.grads.insert(idx, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.grads.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, idx: usize, grad: &[f64]) {
        match self.grads.get_mut(&idx) {
            Some(acc) => {
                assert_eq!(acc.len(), grad.len(), "gradient length mismatch");
                for (a, g) in acc.iter_mut().zip(grad) {
                    *a += g;
                }
            }
            None => {
                self.grads.insert(idx, grad.to_vec());
            }
        }
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: &GradMap) {
        for (idx, g) in other.iter() {
            self.accumulate(idx, g);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }
}
