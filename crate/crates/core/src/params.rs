//! Named parameters and the per-forward session that exposes them on a tape.
//!
//! Each parameter is initialized from its own random stream derived from
//! the store seed and the parameter name, so two networks that share a
//! parameter name and seed share its initial value regardless of what else
//! they contain.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) truncated to ±2·std.
    TruncNormal(f64),
}

pub const WEIGHT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::TruncNormal(std) => {
                let mut rng = Rng::derive(self.seed, name);
                Tensor::from_fn(shape, |_| rng.truncated_normal(std))
            }
        };
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), self.values.len() - 1);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::dim(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Overwrites every parameter whose name matches `pred` using `f`.
    pub fn map_matching(&mut self, pred: impl Fn(&str) -> bool, f: impl Fn(&str, &Tensor) -> Tensor) {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            if pred(name) {
                let next = f(name, value);
                assert_eq!(next.shape(), value.shape());
                *value = next;
            }
        }
    }
}

/// A tape plus lazily registered parameter leaves.
pub struct Session<'a> {
    tape: Tape,
    store: &'a ParamStore,
    leaves: Vec<Option<Var>>,
    track: bool,
}

impl<'a> Session<'a> {
    /// Parameters become differentiable leaves.
    pub fn training(store: &'a ParamStore) -> Self {
        Self::with_tracking(store, true)
    }

    /// Parameters become constants; nothing is differentiable unless the
    /// caller adds leaves itself.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::with_tracking(store, false)
    }

    fn with_tracking(store: &'a ParamStore, track: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            leaves: vec![None; store.len()],
            track,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.track {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.leaves[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Gradient per parameter; parameters unused by the graph get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.store
            .ids()
            .map(|id| match self.leaves[id.0] {
                Some(v) => grads.get_or_zeros(v, self.store.get(id).shape()),
                None => Tensor::zeros(self.store.get(id).shape()),
            })
            .collect()
    }
}

impl Deref for Session<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamStore::new(5);
        let mut b = ParamStore::new(5);
        b.add("other", &[3], Init::TruncNormal(0.02));
        let pa = a.add("w", &[4, 4], Init::TruncNormal(0.02));
        let pb = b.add("w", &[4, 4], Init::TruncNormal(0.02));
        assert_eq!(a.get(pa), b.get(pb));
        let pz = a.add("z", &[2], Init::Zeros);
        assert_eq!(a.get(pz).data(), &[0.0, 0.0]);
    }

    #[test]
    fn session_reuses_leaves() {
        let mut store = ParamStore::new(0);
        let id = store.add("w", &[2], Init::Ones);
        let mut s = Session::training(&store);
        let a = s.param(id);
        let b = s.param(id);
        assert_eq!(a, b);
        let y = s.mul(a, b).unwrap();
        let y = s.sum(y);
        let g = s.backward(y).unwrap();
        assert_eq!(s.param_grads(&g)[0].data(), &[2.0, 2.0]);
    }
}
