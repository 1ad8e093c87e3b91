use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

/// Named parameters and buffers of a model, with gradient accumulators.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        value: Vec<T>,
        trainable: bool,
    ) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter '{name}'")));
        }
        let n: usize = shape.iter().product();
        if value.len() != n {
            return Err(Error::shape(
                "ParamStore::add",
                format!("{name}: shape {shape:?} with {} values", value.len()),
            ));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            grad: vec![T::ZERO; n],
            value,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, shape, vec![T::ZERO; n], trainable)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], v: T, trainable: bool) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, shape, vec![v; n], trainable)
    }

    /// Normal initialization with standard deviation `sqrt(gain / fan_in)`.
    pub fn kaiming<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let std = (gain / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let value = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
        self.add(name, shape, value, true)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::ZERO);
        }
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.index
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, &id)| id)
            .collect()
    }

    /// Converts every value to another precision; gradients are reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                    grad: vec![U::ZERO; p.value.len()],
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies values (not gradients) from a store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Config("parameter stores differ in size".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Config(format!(
                    "parameter layout mismatch: {} vs {}",
                    dst.name, src.name
                )));
            }
            dst.value.copy_from_slice(&src.value);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}
