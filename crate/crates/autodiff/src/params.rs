use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Mixes a run seed with a parameter name so that each parameter's
/// initialisation is independent of creation order.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Glorot/Xavier uniform initialisation of a `(fan_in, fan_out)` matrix:
/// entries drawn from `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<S: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<S>> {
    if shape.len() != 2 {
        return Err(TensorError::InvalidShape {
            op: "xavier_init",
            shape: shape.to_vec(),
            reason: "weight matrices must be 2-D (fan_in, fan_out)".into(),
        });
    }
    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::from_fn(shape, |_| {
        S::from_f64(rng.random_range(-bound..bound))
    }))
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, t: Tensor<S>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Xavier-initialised `[fan_in, fan_out]` weight.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let t = xavier_init(&[fan_in, fan_out], derive_seed(self.seed, name))?;
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, S::one()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<S>) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != t.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set",
                lhs: cur.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Copy of the store with every tensor converted to another precision.
    /// Adds uniform noise in `[-scale, scale]` to every entry, moving away
    /// from structured initial values such as zero biases and unit gains.
    pub fn perturb(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v += S::from_f64(rng.random_range(-scale..=scale));
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            seed: self.seed,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites tensors by name from `(name, tensor)` pairs; every stored
    /// parameter must be present with a matching shape.
    pub fn load_named(&mut self, named: Vec<(String, Tensor<S>)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in named {
            let id = self.id(&name)?;
            self.set(id, t)?;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(TensorError::Format(format!(
                "missing tensor `{}`",
                self.names[i]
            )));
        }
        Ok(())
    }
}
