use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    /// Slash-separated path, e.g. `enc1/block0/attn/qkv/weight`.
    pub name: String,
    pub tensor: Tensor<T>,
    /// Frozen parameters enter graphs as constants and are never updated.
    pub frozen: bool,
    /// Whether decoupled weight decay applies (false for norms, biases and tables).
    pub decay: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            frozen: false,
            decay,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Freezes every parameter whose name does not start with one of `trainable_prefixes`.
    pub fn freeze_all_except(&mut self, trainable_prefixes: &[&str]) {
        for p in &mut self.params {
            p.frozen = !trainable_prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = false;
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                    decay: p.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copies values from `other` by name; every parameter must be present with the same shape.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if src.tensor.shape != p.tensor.shape {
                return Err(Error::shape(
                    p.name.clone(),
                    format!("checkpoint {:?} vs model {:?}", src.tensor.shape, p.tensor.shape),
                ));
            }
            p.tensor.data.clone_from(&src.tensor.data);
        }
        Ok(())
    }

    /// Order-dependent FNV-1a checksum of the names and raw bits of the selected parameters.
    pub fn checksum(&self, include: impl Fn(&Parameter<T>) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| include(p)) {
            feed(p.name.as_bytes());
            buf.clear();
            for v in &p.tensor.data {
                v.write_le(&mut buf);
            }
            feed(&buf);
        }
        h
    }
}

/// Truncated-normal initializer (±2σ), the Swin convention for linear weights.
pub fn trunc_normal<T: Float, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            return T::of(z * std);
        }
    })
}
