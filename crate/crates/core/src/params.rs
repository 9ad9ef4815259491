//! Named parameter storage shared by all model components.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
///
/// Names are dot-separated paths such as `visual_dmn.episode0.memory.weight`.
/// Insertion order is stable and determines checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    /// Register a parameter drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (id, (name, value)) in other.iter().enumerate() {
            let mine = self
                .id(name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter `{name}`")))?;
            if self.values[mine.0].shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` (#{id}) has shape {:?}, model expects {:?}",
                    value.shape(),
                    self.values[mine.0].shape()
                )));
            }
            self.values[mine.0] = value.clone();
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        for v in &mut self.values {
            v.data_mut().fill(value);
        }
    }
}

/// Dense gradient buffers, one per parameter, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Gradients {
            blocks: store.values.iter().map(|v| vec![0.0; v.numel()]).collect(),
        }
    }

    /// Collect parameter gradients from a tape after `backward`.
    pub fn from_tape(store: &ParamStore, tape: &Tape<'_>) -> Self {
        let mut g = Gradients::zeros(store);
        g.add_tape(tape);
        g
    }

    pub fn add_tape(&mut self, tape: &Tape<'_>) {
        for (id, grad) in tape.param_grads() {
            for (a, b) in self.blocks[id.0].iter_mut().zip(grad) {
                *a += b;
            }
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.blocks.iter_mut().flatten().for_each(|v| *v *= c);
    }

    pub fn block(&self, id: ParamId) -> &[f64] {
        &self.blocks[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a.weight", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn tape_reuses_param_leaf() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::vector(vec![2.0]).unwrap()).unwrap();
        let mut t = Tape::with_params(&s);
        let a = t.param(id);
        let b = t.param(id);
        assert_eq!(a, b);
        let y = t.mul(a, b).unwrap();
        t.backward(y).unwrap();
        let g = Gradients::from_tape(&s, &t);
        assert_eq!(g.block(id), &[4.0]);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::zeros(&[2])).unwrap();
        let mut g = Gradients::zeros(&s);
        g.blocks[0] = vec![3.0, 4.0];
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        assert!((g.block(id)[0] - 0.6).abs() < 1e-15);
    }
}
