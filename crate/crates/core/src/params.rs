//! Named parameter storage, freeze masks and the per-step training session.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Parameters keyed by dot-separated path, iterated in lexicographic order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    /// Inserts a new parameter. Paths must be unique.
    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let path = path.into();
        if self.tensors.contains_key(&path) {
            return Err(Error::Contract(format!("duplicate parameter path {path}")));
        }
        self.tensors.insert(path, value);
        Ok(())
    }

    /// Inserts or replaces.
    pub fn set(&mut self, path: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(path)
    }

    pub fn require(&self, path: &str) -> Result<&Tensor<T>> {
        self.get(path)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {path}")))
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor<T>> {
        self.tensors.remove(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.paths().any(|p| p.starts_with(prefix))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Copies every parameter under `prefix` from `other`, replacing existing ones.
    pub fn merge_prefix(&mut self, other: &ParamStore<T>, prefix: &str) {
        for (p, t) in other.iter().filter(|(p, _)| p.starts_with(prefix)) {
            self.set(p, t.clone());
        }
    }

    pub fn retain_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|p, _| p.starts_with(prefix));
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Inserts a weight with entries uniform in `±1/sqrt(fan_in)`.
    pub fn init_uniform(
        &mut self,
        path: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let shape = shape.into();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        self.insert(path, Tensor::new(shape, data)?)
    }
}

/// One flag per parameter, in [`ParamStore`] order. `true` means frozen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    flags: Vec<bool>,
}

impl FreezeMask {
    pub fn none<T: Real>(store: &ParamStore<T>) -> Self {
        FreezeMask {
            flags: vec![false; store.len()],
        }
    }

    pub fn all<T: Real>(store: &ParamStore<T>) -> Self {
        FreezeMask {
            flags: vec![true; store.len()],
        }
    }

    /// Freezes every parameter whose path starts with one of `prefixes`.
    pub fn from_prefixes<T: Real, S: AsRef<str>>(store: &ParamStore<T>, prefixes: &[S]) -> Self {
        FreezeMask {
            flags: store
                .paths()
                .map(|p| prefixes.iter().any(|pre| p.starts_with(pre.as_ref())))
                .collect(),
        }
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        FreezeMask { flags }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn frozen_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn check<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        if self.flags.len() != store.len() {
            return Err(Error::Contract(format!(
                "freeze mask has {} flags for {} parameters",
                self.flags.len(),
                store.len()
            )));
        }
        Ok(())
    }

    /// Set of frozen paths, resolved against `store`.
    pub fn frozen_paths<'a, T: Real>(&self, store: &'a ParamStore<T>) -> Vec<&'a str> {
        store
            .paths()
            .zip(&self.flags)
            .filter(|(_, &f)| f)
            .map(|(p, _)| p)
            .collect()
    }
}

/// Gradients keyed by parameter path.
pub type ParamGrads<T> = BTreeMap<String, Vec<T>>;

/// A graph plus lazily bound parameters: each parameter becomes a leaf the
/// first time a forward function asks for it.
pub struct Session<'p, T: Real> {
    pub graph: Graph<T>,
    store: &'p ParamStore<T>,
    bound: HashMap<String, Var>,
    frozen: HashMap<&'p str, bool>,
    track: bool,
}

impl<'p, T: Real> Session<'p, T> {
    /// Every parameter tracked except those frozen by `mask`.
    pub fn new(store: &'p ParamStore<T>, mask: Option<&FreezeMask>) -> Result<Self> {
        let frozen = match mask {
            Some(m) => {
                m.check(store)?;
                store.paths().zip(m.flags().iter().copied()).collect()
            }
            None => HashMap::new(),
        };
        Ok(Session {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            frozen,
            track: true,
        })
    }

    /// Forward-only session: no parameter receives a gradient.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            frozen: HashMap::new(),
            track: false,
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(path) {
            return Ok(v);
        }
        let value = self
            .store
            .get(path)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {path}")))?
            .clone();
        let trainable = self.track && !self.frozen.get(path).copied().unwrap_or(false);
        let v = if trainable {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.bound.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// Backward from `loss`, returning gradients for every bound trainable parameter.
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads<T>> {
        let mut grads = self.graph.backward(loss)?;
        let mut out = BTreeMap::new();
        for (path, &v) in &self.bound {
            if let Some(g) = grads.take(v) {
                out.insert(path.clone(), g);
            }
        }
        Ok(out)
    }
}
