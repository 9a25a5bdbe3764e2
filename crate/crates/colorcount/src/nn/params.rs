//! Named parameter tensors shared by the tape and the optimizers.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in the store; also the index into gradient tables.
    pub fn index(self) -> usize {
        self.0
    }
}

/// All trainable tensors of a model, addressable by stable names
/// (e.g. `g.enc1.weight`). Name order is the canonical serialization order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    values: Vec<ArrayD<f32>>,
    names: Vec<String>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f32>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.values.len());
        self.values.push(value);
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f32> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Ids in name order (the canonical order for hashing/serialization).
    pub fn ids_by_name(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_name.values().copied()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replace a tensor's contents; the shape must match.
    pub fn set(&mut self, id: ParamId, value: ArrayD<f32>) -> Result<()> {
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {:?} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Deterministic fan-in-scaled Gaussian initializer.
pub struct Initializer {
    rng: ChaCha12Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha12Rng::seed_from_u64(seed) }
    }

    /// Gaussian with std sqrt(2 / fan_in).
    pub fn gaussian(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut self.rng) as f32).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
    }

    pub fn zeros(&mut self, shape: &[usize]) -> ArrayD<f32> {
        ArrayD::zeros(IxDyn(shape))
    }
}
