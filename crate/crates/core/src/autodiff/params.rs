use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Mat, NodeId};
use crate::error::{Result, TsnetError};

/// Ordered learnable tensors of one network.
///
/// The flat ordering used by gradient vectors and checkpoints is tensor order,
/// then row-major within each tensor. For MLPs the tensors are
/// `[W0, b0, W1, b1, ...]` (layer-major, weights before bias), with each
/// weight stored as `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: Vec<Mat>,
}

impl ParamStore {
    pub fn new(tensors: Vec<Mat>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(TsnetError::shape(
                "ParamStore::set_flat",
                format!("expected {} values, got {}", self.len(), values.len()),
            ));
        }
        let mut it = values.iter();
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Registers every tensor as a differentiable leaf, in flat order.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Registers every tensor as a constant (inference only).
    pub fn bind_const(&self, g: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Glorot-uniform matrix: entries in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..=a))
}
