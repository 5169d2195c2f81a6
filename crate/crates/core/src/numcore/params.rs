use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU32 = AtomicU32::new(1);

/// Identity of one parameter tensor: which store, which slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: u32,
    pub slot: u32,
}

/// Named trainable tensors with accumulated gradients.
///
/// Every new store gets a process-unique id, so keys from different stores
/// never collide inside one computation graph. A clone keeps the id, so keys
/// held by a cloned owner stay valid against the cloned values.
#[derive(Debug, Clone)]
pub struct ParamStore {
    id: u32,
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamKey {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let slot = self.values.len();
        self.index.insert(name.clone(), slot);
        self.names.push(name);
        self.grads.push(Tensor::zeros(value.rows(), value.cols()));
        self.values.push(value);
        ParamKey {
            store: self.id,
            slot: slot as u32,
        }
    }

    /// Glorot-uniform weight matrix.
    pub fn insert_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamKey {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert(name, Tensor::uniform(fan_in, fan_out, -limit, limit, rng))
    }

    pub fn key(&self, name: &str) -> Option<ParamKey> {
        self.index.get(name).map(|&slot| ParamKey {
            store: self.id,
            slot: slot as u32,
        })
    }

    pub fn owns(&self, key: ParamKey) -> bool {
        key.store == self.id && (key.slot as usize) < self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        (0..self.values.len()).map(move |slot| ParamKey {
            store: self.id,
            slot: slot as u32,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, key: ParamKey) -> &str {
        &self.names[key.slot as usize]
    }

    pub fn value(&self, key: ParamKey) -> &Tensor {
        debug_assert_eq!(key.store, self.id);
        &self.values[key.slot as usize]
    }

    pub fn value_mut(&mut self, key: ParamKey) -> &mut Tensor {
        debug_assert_eq!(key.store, self.id);
        &mut self.values[key.slot as usize]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn grad(&self, key: ParamKey) -> &Tensor {
        &self.grads[key.slot as usize]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Add the gradients in `grads` that belong to this store.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (key, g) in &grads.0 {
            if key.store == self.id {
                self.grads[key.slot as usize].add_assign(g);
            }
        }
    }

    pub fn grad_sq_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sq_norm).sum()
    }

    /// Overwrite values from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::contract("parameter name lists differ"));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::contract("parameter shapes differ"));
            }
            dst.clone_from(src);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Debug, Default, Clone)]
pub struct Gradients(pub(crate) HashMap<ParamKey, Tensor>);

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.0.get(&key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.0.keys()
    }
}
