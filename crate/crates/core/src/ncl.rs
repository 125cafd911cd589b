//! Noise-aware contrastive learning.
//!
//! Features are re-noised with a randomly drawn input-dependent variance
//! function; the loss pulls the two branch means together while pushing the
//! log-variances apart (capped so the term stays bounded below).

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::dtb::GaussianDiag;
use crate::error::{Result, TsnetError};

/// Default cap on each squared log-variance difference.
pub const DEFAULT_CLAMP_CAP: f64 = 16.0;

/// Loss weights, cap and function library.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NclConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub clamp_cap: f64,
    pub library: Vec<NoiseKind>,
}

impl Default for NclConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            clamp_cap: DEFAULT_CLAMP_CAP,
            library: NoiseKind::ALL.to_vec(),
        }
    }
}

impl NclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0)
            || !(self.lambda2.is_finite() && self.lambda2 >= 0.0)
        {
            return Err(TsnetError::Config("ncl lambdas must be finite and >= 0".into()));
        }
        if !(self.clamp_cap.is_finite() && self.clamp_cap > 0.0) {
            return Err(TsnetError::Config("ncl.clamp_cap must be positive".into()));
        }
        if self.library.is_empty() {
            return Err(TsnetError::Config("ncl.library is empty".into()));
        }
        Ok(())
    }
}

/// The families a noise function is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Constant,
    Sine,
    ExpSigmoid,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::Constant, NoiseKind::Sine, NoiseKind::ExpSigmoid];
}

/// A noise scale function of one standardized feature. The variance is the
/// square of [`NoiseFunction::scale`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseFunction {
    Constant { a: f64 },
    /// `a (sin(w x + p) + 1) / 2 + 0.01`
    Sine { a: f64, w: f64, p: f64 },
    /// `a / (1 + exp(-(x - c)))`
    ExpSigmoid { a: f64, c: f64 },
}

impl NoiseFunction {
    pub fn scale(&self, x: f64) -> f64 {
        match *self {
            NoiseFunction::Constant { a } => a,
            NoiseFunction::Sine { a, w, p } => a * ((w * x + p).sin() + 1.0) / 2.0 + 0.01,
            NoiseFunction::ExpSigmoid { a, c } => a / (1.0 + (-(x - c)).exp()),
        }
    }

    pub fn variance(&self, x: f64) -> f64 {
        self.scale(x).powi(2)
    }

    pub fn kind(&self) -> NoiseKind {
        match self {
            NoiseFunction::Constant { .. } => NoiseKind::Constant,
            NoiseFunction::Sine { .. } => NoiseKind::Sine,
            NoiseFunction::ExpSigmoid { .. } => NoiseKind::ExpSigmoid,
        }
    }

    pub fn draw<R: Rng + ?Sized>(kind: NoiseKind, rng: &mut R) -> Self {
        match kind {
            NoiseKind::Constant => NoiseFunction::Constant {
                a: rng.random_range(0.01..0.3),
            },
            NoiseKind::Sine => NoiseFunction::Sine {
                a: rng.random_range(0.01..0.2),
                w: rng.random_range(0.5..3.0),
                p: rng.random_range(0.0..TAU),
            },
            NoiseKind::ExpSigmoid => NoiseFunction::ExpSigmoid {
                a: rng.random_range(0.02..0.3),
                c: rng.random_range(-2.0..2.0),
            },
        }
    }
}

/// One noise function per feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseFunctionSpec {
    pub features: Vec<NoiseFunction>,
}

impl NoiseFunctionSpec {
    /// All-zero variance; re-noising is then the identity.
    pub fn zero(m: usize) -> Self {
        Self {
            features: vec![NoiseFunction::Constant { a: 0.0 }; m],
        }
    }

    pub fn variance(&self, x: &[f64]) -> Vec<f64> {
        self.features.iter().zip(x).map(|(f, &v)| f.variance(v)).collect()
    }
}

/// Draws an independent function per feature, kind uniform over `library`.
pub fn sample_sigma_k<R: Rng + ?Sized>(
    rng: &mut R,
    m: usize,
    library: &[NoiseKind],
) -> Result<NoiseFunctionSpec> {
    if library.is_empty() {
        return Err(TsnetError::Config("noise function library is empty".into()));
    }
    let features = (0..m)
        .map(|_| {
            let kind = library[rng.random_range(0..library.len())];
            NoiseFunction::draw(kind, rng)
        })
        .collect();
    Ok(NoiseFunctionSpec { features })
}

/// `x + sqrt(Σk(x)) ⊙ ε`.
pub fn add_noise<R: Rng + ?Sized>(x: &[f64], spec: &NoiseFunctionSpec, rng: &mut R) -> Result<Vec<f64>> {
    if x.len() != spec.features.len() {
        return Err(TsnetError::shape(
            "add_noise",
            format!("{} features, spec has {}", x.len(), spec.features.len()),
        ));
    }
    Ok(x.iter()
        .zip(&spec.features)
        .map(|(&v, f)| {
            let e: f64 = rng.sample(StandardNormal);
            v + f.scale(v).abs() * e
        })
        .collect())
}

/// Row-wise [`add_noise`] over a batch.
pub fn add_noise_matrix<R: Rng + ?Sized>(
    x: &Array2<f64>,
    spec: &NoiseFunctionSpec,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let noisy = add_noise(row.as_slice().expect("standard layout"), spec, rng)?;
        row.iter_mut().zip(noisy).for_each(|(d, s)| *d = s);
    }
    Ok(out)
}

/// Clean and re-noised branch outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ClPair {
    pub clean: GaussianDiag,
    pub noised: GaussianDiag,
}

/// `λ1 ‖μn − μCL‖² − λ2 Σ min((log Σn − log ΣCL)², cap)`.
pub fn ncl_loss(pair: &ClPair, lambda1: f64, lambda2: f64, cap: f64) -> Result<f64> {
    let (c, n) = (&pair.clean, &pair.noised);
    if c.dim() != n.dim() {
        return Err(TsnetError::shape("ncl_loss", "branch dims differ"));
    }
    if c.var.iter().chain(&n.var).any(|v| !(*v > 0.0)) {
        return Err(TsnetError::Contract("ncl_loss needs positive variances".into()));
    }
    let drift: f64 = c.mean.iter().zip(&n.mean).map(|(a, b)| (a - b).powi(2)).sum();
    let sep: f64 = c
        .var
        .iter()
        .zip(&n.var)
        .map(|(a, b)| (a.ln() - b.ln()).powi(2).min(cap))
        .sum();
    Ok(lambda1 * drift - lambda2 * sep)
}

/// Batch-averaged [`ncl_loss`]; all operands `B x l`.
pub fn ncl_loss_graph(
    g: &mut Graph,
    (mean_clean, var_clean): (NodeId, NodeId),
    (mean_noised, var_noised): (NodeId, NodeId),
    cfg: &NclConfig,
) -> Result<NodeId> {
    let batch = g.shape(mean_clean).0.max(1) as f64;
    let d = g.sub(mean_clean, mean_noised)?;
    let d2 = g.square(d);
    let drift = g.sum_all(d2);
    let la = g.ln(var_clean);
    let lb = g.ln(var_noised);
    let s = g.sub(la, lb)?;
    let s2 = g.square(s);
    let s2 = g.clamp(s2, 0.0, cfg.clamp_cap);
    let sep = g.sum_all(s2);
    let a = g.scale(drift, cfg.lambda1 / batch);
    let b = g.scale(sep, -cfg.lambda2 / batch);
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gd(m: &[f64], v: &[f64]) -> GaussianDiag {
        GaussianDiag::new(m.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn constant_kind_is_flat() {
        let f = NoiseFunction::Constant { a: 0.1 };
        for x in [-5.0, 0.0, 3.3] {
            assert!((f.variance(x) - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn sine_floor_and_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let f = NoiseFunction::draw(NoiseKind::Sine, &mut rng);
            for i in -50..=50 {
                assert!(f.variance(i as f64 * 0.1) >= 0.01f64.powi(2) - 1e-18);
            }
            if let NoiseFunction::Sine { a, p, .. } = f {
                let direct = (a * (p.sin() + 1.0) / 2.0 + 0.01).powi(2);
                assert_eq!(f.variance(0.0), direct);
            }
        }
    }

    #[test]
    fn drawn_parameters_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = sample_sigma_k(&mut rng, 500, &NoiseKind::ALL).unwrap();
        let mut seen = std::collections::HashSet::new();
        for f in &spec.features {
            seen.insert(f.kind());
            match *f {
                NoiseFunction::Constant { a } => assert!((0.01..0.3).contains(&a)),
                NoiseFunction::Sine { a, w, p } => {
                    assert!((0.01..0.2).contains(&a) && (0.5..3.0).contains(&w) && (0.0..TAU).contains(&p))
                }
                NoiseFunction::ExpSigmoid { a, c } => {
                    assert!((0.02..0.3).contains(&a) && (-2.0..2.0).contains(&c))
                }
            }
        }
        assert_eq!(seen.len(), 3);
        assert!(sample_sigma_k(&mut rng, 2, &[]).is_err());
    }

    #[test]
    fn zero_spec_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = [0.4, -2.0, 1.0];
        assert_eq!(add_noise(&x, &NoiseFunctionSpec::zero(3), &mut rng).unwrap(), x.to_vec());
    }

    #[test]
    fn loss_hand_cases() {
        let a = gd(&[1.0, 2.0], &[0.5, 3.0]);
        let same = ClPair {
            clean: a.clone(),
            noised: a.clone(),
        };
        assert_eq!(ncl_loss(&same, 1.0, 0.1, 16.0).unwrap(), 0.0);
        let p = ClPair {
            clean: gd(&[1.0], &[1.0]),
            noised: gd(&[0.0], &[1.0]),
        };
        assert_eq!(ncl_loss(&p, 1.0, 1.0, 16.0).unwrap(), 1.0);
        // cap engages: ln(e^10) difference squared = 100 > 16
        let q = ClPair {
            clean: gd(&[0.0], &[1.0]),
            noised: gd(&[0.0], &[10f64.exp()]),
        };
        assert_eq!(ncl_loss(&q, 1.0, 1.0, 16.0).unwrap(), -16.0);
    }

    #[test]
    fn graph_matches_scalar() {
        let mut g = Graph::new();
        let mc = g.constant(Array2::from_shape_vec((2, 1), vec![1.0, 0.5]).unwrap());
        let vc = g.constant(Array2::from_shape_vec((2, 1), vec![0.3, 2.0]).unwrap());
        let mn = g.constant(Array2::from_shape_vec((2, 1), vec![0.2, 0.4]).unwrap());
        let vn = g.constant(Array2::from_shape_vec((2, 1), vec![0.5, 1e-5]).unwrap());
        let l = ncl_loss_graph(&mut g, (mc, vc), (mn, vn), &NclConfig::default()).unwrap();
        let want = (ncl_loss(
            &ClPair {
                clean: gd(&[1.0], &[0.3]),
                noised: gd(&[0.2], &[0.5]),
            },
            1.0,
            0.1,
            16.0,
        )
        .unwrap()
            + ncl_loss(
                &ClPair {
                    clean: gd(&[0.5], &[2.0]),
                    noised: gd(&[0.4], &[1e-5]),
                },
                1.0,
                0.1,
                16.0,
            )
            .unwrap())
            / 2.0;
        assert!((g.scalar(l) - want).abs() < 1e-12);
    }
}
