use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Name and shape of one stored parameter, in storage order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 4],
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BlobError {
    #[error("weight blob holds {actual} bytes, layout needs {expected}")]
    Length { expected: usize, actual: usize },
    #[error("parameter layout mismatch at `{name}`")]
    Layout { name: String },
}

/// Ordered, named collection of network parameters.
///
/// Tensors are reference counted so a forward pass can bind them onto a
/// [`Graph`] without copying.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(Arc::new(tensor));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[index])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Records every parameter on `graph`, in storage order.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| graph.parameter(t, trainable))
            .collect()
    }

    /// Like [`ParamStore::bind`], with trainability decided per index.
    pub fn bind_with(&self, graph: &mut Graph, trainable: impl Fn(usize) -> bool) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| graph.parameter(t, trainable(i)))
            .collect()
    }

    /// Pulls the gradient of each bound parameter out of `grads`.
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Gradients) -> Vec<Option<Tensor>> {
        vars.iter().map(|v| grads.take(*v)).collect()
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| ParamSpec {
                name: name.clone(),
                shape: t.shape(),
            })
            .collect()
    }

    /// Little-endian `f32` concatenation of all parameters.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 4);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_blob(layout: &[ParamSpec], blob: &[u8]) -> Result<Self, BlobError> {
        let expected: usize = layout
            .iter()
            .map(|s| s.shape.iter().product::<usize>() * 4)
            .sum();
        if expected != blob.len() {
            return Err(BlobError::Length {
                expected,
                actual: blob.len(),
            });
        }
        let mut store = ParamStore::new();
        let mut offset = 0;
        for spec in layout {
            let n: usize = spec.shape.iter().product();
            let data = blob[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            offset += 4 * n;
            store.push(spec.name.clone(), Tensor::from_vec(spec.shape, data));
        }
        Ok(store)
    }

    /// Fails on the first parameter whose name or shape differs from `expected`.
    pub fn check_layout(&self, expected: &[ParamSpec]) -> Result<(), BlobError> {
        let actual = self.layout();
        for (a, e) in actual.iter().zip(expected) {
            if a != e {
                return Err(BlobError::Layout {
                    name: e.name.clone(),
                });
            }
        }
        if actual.len() != expected.len() {
            let name = expected
                .get(actual.len())
                .or(actual.get(expected.len()))
                .map(|s| s.name.clone())
                .unwrap_or_default();
            return Err(BlobError::Layout { name });
        }
        Ok(())
    }

    /// SHA-256 of the weight blob, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// He-normal initialisation for a conv or linear weight of the given shape.
pub fn he_normal<R: Rng>(shape: [usize; 4], rng: &mut R) -> Tensor {
    let fan_in = shape[1] * shape[2] * shape[3];
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| normal.sample(rng) as f32)
        .collect();
    Tensor::from_vec(shape, data)
}
