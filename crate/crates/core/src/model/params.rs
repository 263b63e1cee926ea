//! Named parameter storage and per-pass binding to autograd leaves.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::autograd::{Gradients, Tensor};
use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Ordered collection of named `f32` arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f32>) {
        assert_eq!(values.len(), shape.iter().product::<usize>(), "parameter {name} size");
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.values.push(values);
    }

    /// Uniform in `[-bound, bound]`.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut RandomStream) {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect();
        self.insert(name, shape, values);
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], value: f32) {
        self.insert(name, shape, vec![value; shape.iter().product()]);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn values(&self, i: usize) -> &[f32] {
        &self.values[i]
    }

    pub fn values_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.values[i]
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.position(name).map(|i| self.values[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f32])> {
        self.names
            .iter()
            .zip(&self.shapes)
            .zip(&self.values)
            .map(|((n, s), v)| (n.as_str(), s.as_slice(), v.as_slice()))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// Copy holding only the parameters whose names start with one of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, shape, values) in self.iter() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                out.insert(name, shape, values.to_vec());
            }
        }
        out
    }

    /// Overwrites values by name from `other`; every name of `other` must exist here
    /// with the same shape.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, shape, values) in other.iter() {
            let i = self
                .position(name)
                .ok_or_else(|| Error::validation("parameters", format!("unknown parameter {name}")))?;
            if self.shapes[i] != shape {
                return Err(Error::validation(
                    "parameters",
                    format!("{name} has shape {:?}, expected {:?}", shape, self.shapes[i]),
                ));
            }
            self.values[i].copy_from_slice(values);
        }
        Ok(())
    }

    /// True when both stores have the same names and shapes in the same order.
    pub fn congruent(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.shapes == other.shapes
    }
}

/// Exposes a [`ParamStore`] as tensors for one forward pass. Leaves are created on
/// first use; when `trainable`, they record gradients.
pub struct Bound<'a> {
    store: &'a ParamStore,
    trainable: bool,
    leaves: RefCell<Vec<Option<Tensor>>>,
}

impl<'a> Bound<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Bound {
            store,
            trainable,
            leaves: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tensor for `name`. Panics on an unknown name, which is a programming error.
    pub fn get(&self, name: &str) -> Tensor {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let mut leaves = self.leaves.borrow_mut();
        leaves[i]
            .get_or_insert_with(|| {
                let data = self.store.values(i).to_vec();
                if self.trainable {
                    Tensor::leaf(data, self.store.shape(i))
                } else {
                    Tensor::new(data, self.store.shape(i))
                }
            })
            .clone()
    }

    /// Gradient per parameter, in store order; unused parameters get zeros.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Vec<f32>> {
        let leaves = self.leaves.borrow();
        (0..self.store.len())
            .map(|i| {
                leaves[i]
                    .as_ref()
                    .and_then(|t| grads.take(t))
                    .unwrap_or_else(|| vec![0.0; self.store.values(i).len()])
            })
            .collect()
    }
}
