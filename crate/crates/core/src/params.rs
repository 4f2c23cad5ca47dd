//! Named parameter storage and binding onto tapes.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Every learnable tensor of a model, keyed by dotted path
/// (`primary.backbone.stage0.conv.w`). Iteration order is the key order,
/// which keeps serialization and optimizer sweeps deterministic.
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

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::Validation(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::Validation(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies every `from.*` tensor onto the matching `to.*` name.
    pub fn copy_prefix(&mut self, from: &str, to: &str) -> Result<()> {
        let src = format!("{from}.");
        let copies: Vec<(String, Tensor)> = self
            .params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&src).map(|rest| (format!("{to}.{rest}"), v.clone())))
            .collect();
        for (name, value) in copies {
            let slot = self.get_mut(&name)?;
            if slot.shape() != value.shape() {
                return Err(Error::Validation(format!(
                    "cannot copy into `{name}`: shape {:?} vs {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value;
        }
        Ok(())
    }

    /// Byte image of all tensors whose name starts with one of `prefixes`.
    pub fn bytes_of(&self, prefixes: &[&str]) -> Vec<u8> {
        self.params
            .iter()
            .filter(|(k, _)| in_groups(k, prefixes))
            .flat_map(|(k, v)| k.bytes().chain(v.to_le_bytes()).collect::<Vec<_>>())
            .collect()
    }

    /// Registers parameters on `tape` on first use. Names for which
    /// `trainable` is false become untracked constants.
    pub fn bind<'s, 't>(&'s self, tape: &'t Tape, trainable: &'s dyn Fn(&str) -> bool) -> Bound<'s, 't> {
        Bound { store: Some(self), tape, trainable, vars: RefCell::new(HashMap::new()) }
    }
}

/// True when `name` equals a group prefix or lies underneath it.
pub fn in_groups(name: &str, groups: &[&str]) -> bool {
    groups.iter().any(|g| name.strip_prefix(g).is_some_and(|rest| rest.is_empty() || rest.starts_with('.')))
}

/// Lazily bound view of a [`ParamStore`] on one tape.
pub struct Bound<'s, 't> {
    store: Option<&'s ParamStore>,
    tape: &'t Tape,
    trainable: &'s dyn Fn(&str) -> bool,
    vars: RefCell<HashMap<String, Var<'t>>>,
}

fn always(_: &str) -> bool {
    true
}

impl<'s, 't> Bound<'s, 't> {
    /// A binding over already-registered vars, all treated as trainable.
    /// Lookups of other names fail.
    pub fn from_vars(tape: &'t Tape, names: &[String], vars: &[Var<'t>]) -> Self {
        Bound {
            store: None,
            tape,
            trainable: &always,
            vars: RefCell::new(names.iter().cloned().zip(vars.iter().copied()).collect()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let store = self.store.ok_or_else(|| Error::Validation(format!("parameter `{name}` is not bound")))?;
        let value = store.get(name)?.clone();
        let var = self.tape.leaf(value, (self.trainable)(name));
        self.vars.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    /// Gradients of every bound trainable parameter, keyed by name.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .filter(|(k, _)| (self.trainable)(k))
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}

/// Parameter initializers driven by a seeded stream.
pub struct Init<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    /// He-normal: N(0, 2 / fan_in).
    pub fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        self.normal(shape, std)
    }

    /// Glorot-normal: N(0, 2 / (fan_in + fan_out)).
    pub fn glorot(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.normal(shape, std)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_matching_respects_path_boundaries() {
        assert!(in_groups("primary.backbone.stage0.w", &["primary.backbone"]));
        assert!(in_groups("cff", &["cff"]));
        assert!(!in_groups("cffx.w", &["cff"]));
        assert!(!in_groups("ccff.cff.w", &["cff"]));
    }

    #[test]
    fn frozen_names_bind_as_constants() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::vector(vec![1.0, 2.0]));
        store.insert("b.w", Tensor::vector(vec![3.0, 4.0]));
        let tape = Tape::new();
        let trainable = |n: &str| n.starts_with("a.");
        let bound = store.bind(&tape, &trainable);
        let (a, b) = (bound.get("a.w").unwrap(), bound.get("b.w").unwrap());
        assert_eq!(bound.get("a.w").unwrap().id(), a.id());
        let loss = a.mul(b).unwrap().sum_all().unwrap();
        let grads = bound.grads(&tape.backward(loss).unwrap());
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["a.w"].data(), &[3.0, 4.0]);
        assert!(bound.get("missing").is_err());
    }

    #[test]
    fn copy_prefix_moves_matching_tensors() {
        let mut store = ParamStore::new();
        store.insert("p.x", Tensor::scalar(1.0));
        store.insert("q.x", Tensor::scalar(0.0));
        store.copy_prefix("p", "q").unwrap();
        assert_eq!(store.get("q.x").unwrap().item(), 1.0);
    }
}
