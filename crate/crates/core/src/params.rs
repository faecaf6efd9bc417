//! Named parameter storage and binding onto a graph.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Xavier-uniform `rows x cols` matrix.
    pub fn xavier(&mut self, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize) {
        self.xavier_gain(rng, name, rows, cols, 1.0);
    }

    pub fn xavier_gain(&mut self, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize, gain: f64) {
        let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data).expect("positive dims"));
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.insert(name, Tensor::filled(&[rows, cols], value));
    }
}

/// A [`ParamStore`] registered on a [`Graph`].
#[derive(Debug, Clone)]
pub struct Bound<'s> {
    store: &'s ParamStore,
    vars: Vec<Var>,
}

impl<'s> Bound<'s> {
    /// Registers every parameter as a trainable leaf.
    pub fn trainable(g: &mut Graph, store: &'s ParamStore) -> Self {
        let vars = store.tensors.iter().map(|t| g.param(t.clone())).collect();
        Self { store, vars }
    }

    /// Registers every parameter as a constant (inference).
    pub fn frozen(g: &mut Graph, store: &'s ParamStore) -> Self {
        let vars = store.tensors.iter().map(|t| g.constant(t.clone())).collect();
        Self { store, vars }
    }

    /// Uses existing graph nodes, one per parameter in store order (e.g. the
    /// leaves created by a gradient checker).
    pub fn from_vars(store: &'s ParamStore, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), store.len(), "one var per parameter");
        Self { store, vars }
    }

    /// Handle of `name`. Panics on unknown names: parameter sets are
    /// created by the same code that reads them.
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.vars[i]
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.store.position(name).map(|i| self.vars[i])
    }

    /// `(name, var)` pairs in store order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.store.names.iter().map(String::as_str).zip(self.vars.iter().copied())
    }
}
