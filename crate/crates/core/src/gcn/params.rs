use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{Gradients, Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Puts every tensor on the tape, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        BoundParams { vars }
    }

    /// Binds only parameters under `prefix` as trainable; the rest are constants.
    pub fn bind_prefix(&self, tape: &mut Tape, prefix: &str) -> BoundParams {
        self.bind_where(tape, |k| k.starts_with(prefix))
    }

    /// Binds parameters whose name satisfies `trainable` as differentiable.
    pub fn bind_where(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable(k))))
            .collect();
        BoundParams { vars }
    }

    /// Uniform `(-a, a)` with `a = 1 / sqrt(fan_in)`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }
}

/// Tape handles of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        match self.vars.get(name) {
            Some(v) => Ok(*v),
            None => contract("params", format!("missing parameter `{name}`")),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    /// Replaces or adds one handle.
    pub fn set(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    /// Handles under `prefix.`, with the prefix stripped.
    pub fn scoped(&self, prefix: &str) -> BoundParams {
        let head = format!("{prefix}.");
        let vars = self
            .vars
            .iter()
            .filter_map(|(k, &v)| k.strip_prefix(&head).map(|s| (s.to_string(), v)))
            .collect();
        BoundParams { vars }
    }

    /// Gradients keyed by parameter name (zeros where unreachable).
    pub fn named_grads(&self, tape: &Tape, grads: &Gradients, prefix: &str) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(tape, v)))
            .collect()
    }
}
