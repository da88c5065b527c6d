use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Scalar, Tensor};
use super::{NetError, Result};
use crate::rng::stream_rng;

/// Handle to a trainable array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Initialisation rule for a new parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in ±√(6 / fan_in).
    FanInUniform { fan_in: usize },
    Normal { std: f64 },
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a parameter drawn from `init`; the draw depends only on `(seed, name)`.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> ParamId {
        let key = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        });
        let mut rng = stream_rng(seed, &[0x9a7a, key]);
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::FanInUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
            }
            Init::Normal { std } => {
                let d = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| T::lit(d.sample(&mut rng)))
            }
        };
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names and values at another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Overwrites values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let id = other
                .find(name)
                .ok_or_else(|| NetError::ConfigMismatch(format!("missing parameter '{name}'")))?;
            let src = other.get(id);
            if src.shape() != self.tensors[i].shape() {
                return Err(NetError::ConfigMismatch(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }
}
