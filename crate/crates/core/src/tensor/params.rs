use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Gradients, Graph, Tensor, Var};

/// Named parameter tensors. Ordered by name so that every iteration over the
/// store (initialization, updates, serialization) is deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Gradient tensors keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn new() -> Self {
        GradientMap::default()
    }

    /// Zero gradients for the named parameters of `store`.
    pub fn zeros_like(store: &ParamStore, names: &[String]) -> Result<Self> {
        let mut grads = BTreeMap::new();
        for n in names {
            grads.insert(n.clone(), Tensor::zeros(store.require(n)?.shape()));
        }
        Ok(GradientMap { grads })
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.grads.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += factor * other`; keys missing from `self` are inserted.
    pub fn add_scaled(&mut self, other: &GradientMap, factor: f64) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(mine) => {
                    if mine.shape() != g.shape() {
                        return Err(Error::Shape { op: "gradient add", lhs: mine.shape().to_vec(), rhs: g.shape().to_vec() });
                    }
                    for (a, b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a += factor * b;
                    }
                }
                None => {
                    let mut t = g.clone();
                    t.data_mut().iter_mut().for_each(|v| *v *= factor);
                    self.grads.insert(name.clone(), t);
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }

    /// All coordinates in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.grads.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// `name[i]` labels in the same order as [`GradientMap::flatten`].
    pub fn coordinate_labels(&self) -> Vec<String> {
        self.grads.iter().flat_map(|(k, t)| (0..t.numel()).map(move |i| format!("{k}[{i}]"))).collect()
    }

    /// Largest absolute coordinate difference; `None` if the key sets differ.
    pub fn max_abs_diff(&self, other: &GradientMap) -> Option<f64> {
        if self.grads.len() != other.grads.len() {
            return None;
        }
        let mut worst = 0.0f64;
        for (name, a) in &self.grads {
            let b = other.grads.get(name)?;
            if a.shape() != b.shape() {
                return None;
            }
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs());
            }
        }
        Some(worst)
    }

    /// Restricts to the given names (names absent from `self` are skipped).
    pub fn restrict(&self, names: &[String]) -> GradientMap {
        let grads = names.iter().filter_map(|n| self.grads.get(n).map(|t| (n.clone(), t.clone()))).collect();
        GradientMap { grads }
    }
}

/// Maps parameter names onto leaves of one graph.
///
/// Binding the same name twice through one binder returns the same leaf, so
/// gradients from every use accumulate. Two binders over the same store give
/// two independent leaves for a shared parameter, which keeps the two
/// contributions apart.
#[derive(Debug)]
pub struct Binder<'a> {
    store: &'a ParamStore,
    leaves: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder { store, leaves: BTreeMap::new() }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn bind(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let t = self.store.require(name)?;
        let v = g.leaf(t);
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradient map over `names`. Parameters never bound get zero gradients
    /// of matching shape.
    pub fn gradient_map(&self, grads: &Gradients, names: &[String]) -> Result<GradientMap> {
        let mut out = GradientMap::new();
        for name in names {
            let shape = self.store.require(name)?.shape().to_vec();
            let t = match self.leaves.get(name).and_then(|&v| grads.get(v)) {
                Some(g) => Tensor::new(shape, g.to_vec())?,
                None => Tensor::zeros(&shape),
            };
            out.insert(name.clone(), t);
        }
        Ok(out)
    }
}
