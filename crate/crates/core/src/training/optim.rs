use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, ParamStore};
use crate::error::{Result, TsnetError};

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<Mat>>,
    v: Vec<Vec<Mat>>,
}

impl Adam {
    pub fn new(stores: &[&ParamStore], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<Mat>> = stores
            .iter()
            .map(|s| s.tensors().iter().map(|t| Mat::zeros(t.dim())).collect())
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &[Vec<Mat>]) -> Result<()> {
        if stores.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TsnetError::shape("adam", "store count changed"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (si, store) in stores.iter_mut().enumerate() {
            for (ti, w) in store.tensors_mut().iter_mut().enumerate() {
                let g = &grads[si][ti];
                let m = &mut self.m[si][ti];
                let v = &mut self.v[si][ti];
                ndarray::Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                });
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<Mat>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    norm
}
