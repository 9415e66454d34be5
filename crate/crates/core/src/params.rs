//! Named parameter tensors and their gradient accumulators.
//!
//! Paths are hierarchical, dot separated, and form a stable naming contract:
//! checkpoints key on them. Inference-network parameters live under `inf.`,
//! generative-network parameters under `gen.`.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    paths: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            paths: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let path = path.into();
        if self.index.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path {path}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(path.clone(), id);
        self.paths.push(path);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.paths[id.0]
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).copied()
    }

    pub fn by_path(&self, path: &str) -> Option<&Tensor<T>> {
        self.id(path).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.paths
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (p, t))| (ParamId(i), p.as_str(), t))
    }

    /// Replace the values of an existing parameter, keeping its shape.
    pub fn assign(&mut self, path: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self
            .id(path)
            .ok_or_else(|| Error::Corrupt(format!("unknown parameter path {path}")))?;
        let slot = &mut self.tensors[id.0];
        if slot.shape() != tensor.shape() {
            return Err(Error::Corrupt(format!(
                "shape mismatch for {path}: stored {:?}, got {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            paths: self.paths.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// One gradient accumulator per parameter, shaped like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn zeros_like(store: &ParameterStore<T>) -> Self {
        Self {
            grads: store
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::ZERO);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

/// Normal(0, std²) draws truncated at ±2 std by rejection.
pub fn truncated_normal<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    std: f64,
) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::from_f64(z * std);
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_path_rejected() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("gen.a", Tensor::zeros(1, 1)).unwrap();
        assert!(s.insert("gen.a", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn truncated_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = truncated_normal(&mut rng, 100, 100, 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn assign_checks_shape() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("inf.w", Tensor::zeros(2, 3)).unwrap();
        assert!(s.assign("inf.w", Tensor::zeros(3, 2)).is_err());
        assert!(s.assign("inf.w", Tensor::filled(2, 3, 1.0)).is_ok());
        assert_eq!(s.by_path("inf.w").unwrap().get(1, 2), 1.0);
    }
}
