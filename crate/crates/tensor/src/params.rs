use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::ops::norm::BatchStats;
use crate::Scalar;

/// How a tensor is initialized and whether the optimizer updates it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Xavier-normal over `(fan_in, fan_out)` derived from the shape.
    Weight,
    /// Zeros.
    Bias,
    /// Ones (normalization scale).
    Scale,
    /// Normal with standard deviation 0.02 (token and position embeddings).
    Embedding,
    /// Non-trainable buffer initialized to zeros (running mean).
    BufferZeros,
    /// Non-trainable buffer initialized to ones (running variance).
    BufferOnes,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BufferZeros | ParamKind::BufferOnes)
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub value: Arc<ArrayD<T>>,
    pub kind: ParamKind,
}

/// Named, insertion-ordered collection of model tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

/// Fan-in and fan-out for Xavier initialization: `[out, in, k...]` layout.
fn fans(shape: &[usize]) -> (f64, f64) {
    match shape.len() {
        0 => (1.0, 1.0),
        1 => (shape[0] as f64, shape[0] as f64),
        _ => {
            let receptive: usize = shape[2..].iter().product();
            ((shape[1] * receptive) as f64, (shape[0] * receptive) as f64)
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Register a tensor with zero contents; values are drawn by [`Self::initialize`].
    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind) {
        let name = name.into();
        assert!(
            !self.entries.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.entries.insert(
            name,
            ParamEntry {
                value: Arc::new(ArrayD::zeros(IxDyn(shape))),
                kind,
            },
        );
    }

    /// Draw every tensor from its kind's distribution, in declaration order,
    /// from a stream seeded by `seed`.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for entry in self.entries.values_mut() {
            let shape = entry.value.shape().to_vec();
            let value = match entry.kind {
                ParamKind::Weight => {
                    let (fan_in, fan_out) = fans(&shape);
                    let std = (2.0 / (fan_in + fan_out)).sqrt();
                    sample_normal(&shape, std, &mut rng)
                }
                ParamKind::Embedding => sample_normal(&shape, 0.02, &mut rng),
                ParamKind::Bias | ParamKind::BufferZeros => ArrayD::zeros(IxDyn(&shape)),
                ParamKind::Scale | ParamKind::BufferOnes => ArrayD::ones(IxDyn(&shape)),
            };
            entry.value = Arc::new(value);
        }
    }

    /// Re-draw only tensors whose name starts with `prefix`.
    pub fn reinitialize_prefix(&mut self, prefix: &str, seed: u64) {
        let mut sub = ParamStore::new();
        for (name, e) in self.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            sub.declare(name.clone(), e.value.shape(), e.kind);
        }
        sub.initialize(seed);
        for (name, e) in sub.entries {
            self.entries[&name] = e;
        }
    }

    pub fn get(&self, name: &str) -> &Arc<ArrayD<T>> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set(&mut self, name: &str, value: ArrayD<T>) {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(e.value.shape(), value.shape(), "shape change for {name}");
        e.value = Arc::new(value);
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|n, _| !n.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind.trainable())
            .map(|e| e.value.len())
            .sum()
    }

    /// Fold running statistics into `<key>.running_mean` / `<key>.running_var`.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats<T>)], momentum: T) {
        for (key, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{key}.{suffix}");
                let cur = self.get(&name);
                let mut next = (**cur).clone();
                for (i, v) in next.iter_mut().enumerate() {
                    *v = (T::one() - momentum) * *v + momentum * batch[i];
                }
                self.set(&name, next);
            }
        }
    }

    /// SHA-256 over names, shapes and values (as little-endian `f64`).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            h.update(name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.iter() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn sample_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let vals: Vec<T> = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
}
