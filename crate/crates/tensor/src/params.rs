//! Named parameter storage and its binding onto a tape.

use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered map from parameter name to value. Iteration order is insertion
/// order, which keeps checkpoints and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

pub type NamedGrads<T> = IndexMap<String, Tensor<T>>;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Puts every parameter on `tape`. Parameters for which `trainable`
    /// returns false are recorded as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| {
                let v = tape.leaf(value.clone(), trainable(name));
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameter name to tape handle, produced by [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every bound parameter that was recorded as trainable.
    pub fn collect_grads<T: Scalar>(&self, tape: &Tape<T>, grads: &Gradients<T>) -> NamedGrads<T> {
        self.vars
            .iter()
            .filter(|(_, &v)| tape.requires_grad(v))
            .map(|(k, &v)| (k.clone(), grads.wrt(v)))
            .collect()
    }
}
