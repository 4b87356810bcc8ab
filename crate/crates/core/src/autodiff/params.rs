use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::Tensor;
use crate::error::{invalid, Result};
use crate::rng::{self, Rng};
use crate::Real;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named learnable tensors of one model, in registration order.
///
/// Names are slash-separated paths (`"wavenet/layer3/dilated"`) and are
/// unique within the store; they decide where a tensor lands in a checkpoint.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(invalid!("duplicate parameter name {name}"));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(invalid!("parameter {} has shape {:?}, got {:?}", slot.name, slot.value.shape(), value.shape()));
        }
        slot.value = value;
        Ok(())
    }

    /// Copies every tensor from `other`, matched by name.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(invalid!("expected {} parameters, got {}", self.len(), other.len()));
        }
        for p in &mut self.params {
            let src = other.id(&p.name).ok_or_else(|| invalid!("missing parameter {}", p.name))?;
            let v = other.get(src);
            if v.shape() != p.value.shape() {
                return Err(invalid!("parameter {} has shape {:?}, got {:?}", p.name, p.value.shape(), v.shape()));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|p| Parameter { name: p.name.clone(), value: p.value.cast() }).collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.to_string()).collect()
    }
}

/// Weight initializers.
pub mod init {
    use super::*;

    /// Uniform in `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier<T: Real>(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        uniform(rng, shape, a)
    }

    pub fn uniform<T: Real>(rng: &mut Rng, shape: &[usize], a: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| rng::uniform(rng, -a, a))
    }

    pub fn normal<T: Real>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| rng::normal(rng, 0.0, std))
    }
}
