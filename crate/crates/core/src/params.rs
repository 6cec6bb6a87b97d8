//! Named parameter storage shared by the fusion network and the gate.
//!
//! A [`ParamStore`] owns plain `f64` buffers in registration order; that order
//! is the checkpoint manifest order. [`ParamStore::bind`] materializes the
//! buffers as tensor leaves for one forward pass.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Normal with the given standard deviation.
    Normal(f64),
    /// He normal for a layer with this fan-in, scaled for a leaky ReLU slope.
    He { fan_in: usize, slope: f64 },
    /// Glorot uniform.
    Xavier { fan_in: usize, fan_out: usize },
}

impl Init {
    fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::He { fan_in, slope } => {
                let std = (2.0 / ((1.0 + slope * slope) * fan_in.max(1) as f64)).sqrt();
                Init::Normal(std).sample(n, rng)
            }
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            }
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if numel(shape) != values.len() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}`: shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            values,
        });
        Ok(())
    }

    pub(crate) fn register<R: Rng + ?Sized>(&mut self, name: String, shape: &[usize], init: Init, rng: &mut R) {
        let values = init.sample(numel(shape), rng);
        self.insert(name, shape, values).expect("parameter layout is static");
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn weight_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.index.get(name).map(|&i| &mut self.entries[i])
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Same names, same shapes, same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Tensor leaves for one forward pass; `trainable` turns on gradients.
    pub fn bind(&self, trainable: bool) -> Bound<'_> {
        self.bind_where(|_| trainable)
    }

    /// Like [`ParamStore::bind`], with gradients only where `trainable(name)`.
    pub fn bind_where(&self, trainable: impl Fn(&str) -> bool) -> Bound<'_> {
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                let t = Tensor::from_vec(&e.shape, e.values.clone()).expect("validated on insert");
                if trainable(&e.name) {
                    t.with_requires_grad()
                } else {
                    t
                }
            })
            .collect();
        Bound { store: self, tensors }
    }

    /// Binds caller-supplied tensors (in manifest order) to this layout.
    pub fn bind_with(&self, tensors: Vec<Tensor>) -> Result<Bound<'_>> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for (e, t) in self.entries.iter().zip(&tensors) {
            if e.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}`: expected shape {:?}, got {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
        }
        Ok(Bound { store: self, tensors })
    }

    /// `(shape, values)` pairs in manifest order, the input format of
    /// [`crate::tensor::gradcheck::gradcheck`].
    pub fn as_inputs(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        self.entries.iter().map(|e| (e.shape.clone(), e.values.clone())).collect()
    }
}

/// Parameters materialized as tensors on the current thread.
pub struct Bound<'a> {
    store: &'a ParamStore,
    tensors: Vec<Tensor>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.store
            .index
            .get(name)
            .map(|&i| self.tensors[i].clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Accumulated gradients in manifest order; parameters the backward pass
    /// never reached get zeros.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad_vec().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }

    /// Like [`Bound::grads`] but `None` where no gradient arrived.
    pub fn reached(&self) -> Vec<bool> {
        self.tensors.iter().map(|t| t.grad().is_some()).collect()
    }
}
