//! Named parameter storage, initialization and graph binding.
//!
//! Parameters are addressed by dotted paths (`enc.0.1.tsa.w_q`), which is
//! also the key layout of checkpoints.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Panics when `name` is absent; for call sites whose key set is fixed by construction.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let p = format!("{prefix}.");
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Binds all tensors as trainable leaves of `graph`.
    pub fn bind(&self, graph: &Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), graph.leaf(v.clone()))).collect(),
        }
    }

    /// Binds all tensors as constants.
    pub fn bind_frozen(&self, graph: &Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), graph.constant(v.clone()))).collect(),
        }
    }
}

/// Parameters living on a graph.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn scope(&self) -> Scope<'_> {
        Scope { bound: self, prefix: String::new() }
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// A prefixed view into [`Bound`].
#[derive(Clone)]
pub struct Scope<'a> {
    bound: &'a Bound,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn get(&self, name: &str) -> &'a Var {
        let key = self.key(name);
        self.bound.vars.get(&key).unwrap_or_else(|| panic!("missing parameter {key}"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.bound.vars.contains_key(&self.key(name))
    }

    pub fn sub(&self, name: impl std::fmt::Display) -> Scope<'a> {
        Scope { bound: self.bound, prefix: self.key(&name.to_string()) }
    }

    fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }
}

/// Writes freshly initialized tensors into a store under a prefix.
pub struct ParamBuilder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_, R> {
        let prefix = self.key(&name.to_string());
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn put(&mut self, name: &str, t: Tensor) {
        let key = self.key(name);
        self.store.insert(key, t);
    }

    /// Fan-in scaled uniform, bound `1/sqrt(fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(shape.to_vec(), bound, self.rng);
        self.put(name, t);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.put(name, Tensor::zeros(shape.to_vec()));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.put(name, Tensor::ones(shape.to_vec()));
    }

    /// `w_<name>: [cin, cout]` and `b_<name>: [cout]`.
    pub fn linear(&mut self, name: &str, cin: usize, cout: usize) {
        self.uniform(&format!("w_{name}"), &[cin, cout], cin);
        self.uniform(&format!("b_{name}"), &[cout], cin);
    }

    pub fn linear_no_bias(&mut self, name: &str, cin: usize, cout: usize) {
        self.uniform(&format!("w_{name}"), &[cin, cout], cin);
    }

    /// `w_<name>: [k, k, cin, cout]` and `b_<name>: [cout]`.
    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) {
        self.uniform(&format!("w_{name}"), &[k, k, cin, cout], k * k * cin);
        self.uniform(&format!("b_{name}"), &[cout], k * k * cin);
    }

    /// `w_<name>: [k, k, c]` and `b_<name>: [c]`.
    pub fn depthwise(&mut self, name: &str, k: usize, c: usize) {
        self.uniform(&format!("w_{name}"), &[k, k, c], k * k);
        self.uniform(&format!("b_{name}"), &[c], k * k);
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) {
        self.ones(&format!("{name}_w"), &[c]);
        self.zeros(&format!("{name}_b"), &[c]);
    }
}
