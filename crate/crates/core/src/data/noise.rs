use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Result, TsnetError};

/// Distribution family of injected noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseKindPlan {
    /// `N(0, σ²)` added.
    #[default]
    GaussianAdditive,
    /// Centered gamma with the given shape and std σ, added.
    Gamma { shape: f64 },
    /// Value scaled by `1 + N(0, σ²)`.
    Multiplicative,
    /// Each cell independently replaced, with probability `rate`, by the
    /// column's training minimum or maximum.
    SaltPepper,
    /// `N(mean, σ²)` added.
    GaussianNonzeroMean { mean: f64 },
}

/// What noise to inject into the training split.
///
/// `feature_sigma` and `system_sigma` are standard deviations, applied to
/// features and targets respectively. Except for salt-and-pepper, `rate` is
/// the fraction of training rows affected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoisePlan {
    #[serde(flatten)]
    pub kind: NoiseKindPlan,
    pub feature_sigma: f64,
    pub system_sigma: f64,
    pub rate: f64,
}

impl Default for NoisePlan {
    fn default() -> Self {
        Self {
            kind: NoiseKindPlan::GaussianAdditive,
            feature_sigma: 0.4,
            system_sigma: 0.8,
            rate: 0.0,
        }
    }
}

impl NoisePlan {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(TsnetError::Contract(format!("noise rate {} outside [0, 1]", self.rate)));
        }
        if !(self.feature_sigma >= 0.0 && self.system_sigma >= 0.0) {
            return Err(TsnetError::Contract("noise sigmas must be >= 0".into()));
        }
        if let NoiseKindPlan::Gamma { shape } = self.kind {
            if !(shape > 0.0 && shape.is_finite()) {
                return Err(TsnetError::Contract("gamma shape must be positive".into()));
            }
        }
        Ok(())
    }
}

fn perturb<R: Rng + ?Sized>(v: f64, sigma: f64, kind: NoiseKindPlan, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    match kind {
        NoiseKindPlan::GaussianAdditive => v + sigma * z,
        NoiseKindPlan::GaussianNonzeroMean { mean } => v + mean + sigma * z,
        NoiseKindPlan::Multiplicative => v * (1.0 + sigma * z),
        NoiseKindPlan::Gamma { shape } => {
            if sigma == 0.0 {
                return v;
            }
            let theta = sigma / shape.sqrt();
            let g = Gamma::new(shape, theta).expect("validated").sample(rng);
            v + g - shape * theta
        }
        NoiseKindPlan::SaltPepper => unreachable!("handled per cell"),
    }
}

fn salt_pepper<R: Rng + ?Sized>(a: &mut Array2<f64>, rows: &[usize], rate: f64, rng: &mut R) {
    let sub = a.select(Axis(0), rows);
    let lo: Vec<f64> = sub.columns().into_iter().map(|c| c.fold(f64::INFINITY, |m, &v| m.min(v))).collect();
    let hi: Vec<f64> = sub.columns().into_iter().map(|c| c.fold(f64::NEG_INFINITY, |m, &v| m.max(v))).collect();
    for &r in rows {
        for j in 0..a.ncols() {
            if rng.random_bool(rate) {
                a[[r, j]] = if rng.random_bool(0.5) { lo[j] } else { hi[j] };
            }
        }
    }
}

/// Applies `plan` to the training rows of `dataset`; validation and test
/// rows are left untouched.
pub fn inject_noise<R: Rng + ?Sized>(dataset: &Dataset, plan: &NoisePlan, rng: &mut R) -> Result<Dataset> {
    plan.validate()?;
    let train = dataset.split_indices()?.train.clone();
    let mut out = dataset.clone();
    if plan.rate == 0.0 {
        return Ok(out);
    }
    if plan.kind == NoiseKindPlan::SaltPepper {
        salt_pepper(&mut out.x, &train, plan.rate, rng);
        salt_pepper(&mut out.y, &train, plan.rate, rng);
        return Ok(out);
    }
    let count = ((train.len() as f64) * plan.rate).round() as usize;
    let picked = sample(rng, train.len(), count.min(train.len()));
    for p in picked.iter() {
        let r = train[p];
        for v in out.x.row_mut(r).iter_mut() {
            *v = perturb(*v, plan.feature_sigma, plan.kind, rng);
        }
        for v in out.y.row_mut(r).iter_mut() {
            *v = perturb(*v, plan.system_sigma, plan.kind, rng);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize) -> Dataset {
        let x = Array2::from_shape_fn((n, 2), |(i, j)| (i + j) as f64 * 0.01);
        let y = Array2::from_shape_fn((n, 1), |(i, _)| i as f64 * 0.02);
        Dataset::from_arrays(x, y).unwrap().split((0.6, 0.2, 0.2), 0).unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let d = data(20);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(inject_noise(&d, &NoisePlan::default(), &mut rng).unwrap(), d);
    }

    #[test]
    fn test_split_untouched_and_rows_counted() {
        let d = data(100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = NoisePlan {
            rate: 0.5,
            ..NoisePlan::default()
        };
        let n = inject_noise(&d, &plan, &mut rng).unwrap();
        let s = d.split.as_ref().unwrap();
        for &r in s.val.iter().chain(&s.test) {
            assert_eq!(n.x.row(r), d.x.row(r));
            assert_eq!(n.y.row(r), d.y.row(r));
        }
        let changed = s.train.iter().filter(|&&r| n.y[[r, 0]] != d.y[[r, 0]]).count();
        assert_eq!(changed, 30);
    }

    #[test]
    fn gamma_is_centered_with_requested_sd() {
        let d = data(20000);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = NoisePlan {
            kind: NoiseKindPlan::Gamma { shape: 2.0 },
            rate: 1.0,
            ..NoisePlan::default()
        };
        let n = inject_noise(&d, &plan, &mut rng).unwrap();
        let diffs: Vec<f64> = d.split.as_ref().unwrap().train.iter().map(|&r| n.y[[r, 0]] - d.y[[r, 0]]).collect();
        let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!(m.abs() < 0.03 && (sd - 0.8).abs() / 0.8 < 0.05, "{m} {sd}");
    }

    #[test]
    fn bad_rate_rejected() {
        let d = data(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = NoisePlan {
            rate: 1.5,
            ..NoisePlan::default()
        };
        assert!(inject_noise(&d, &plan, &mut rng).is_err());
    }
}
