use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter '{}'", name)));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(())
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

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn numel(&self) -> usize {
        self.numel_with_prefix("")
    }

    /// Same names in the same order with the same shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::shape("params", "parameter names differ"));
        }
        for ((n, a), b) in self.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "params",
                    format!("'{}' is {:?} vs {:?}", n, a.shape(), b.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Places every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Bound<'a> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        Bound { params: self, vars }
    }

    /// Gradients for every parameter after `tape.backward`, zero where none reached.
    pub fn gradients(&self, tape: &Tape, bound: &Bound<'_>) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }

    /// Order-sensitive FNV-1a digest of every value, for cheap equality checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Tape handles for a [`ParamSet`].
pub struct Bound<'a> {
    params: &'a ParamSet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{}'", name)))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// He-uniform weights: bound `sqrt(6 / fan_in)`.
pub(crate) fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}
