//! Combination of the network Gaussian with a prior, reparameterized
//! sampling, the heteroscedastic MSE loss and total-loss assembly.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::dtb::GaussianDiag;
use crate::error::{Result, TsnetError};

/// Fallback Gaussian used where the density weight is low.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl PriorSpec {
    pub fn new(mu: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mu.len() != var.len() {
            return Err(TsnetError::shape("PriorSpec", "mu and var lengths differ"));
        }
        if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) || mu.iter().any(|m| !m.is_finite()) {
            return Err(TsnetError::Contract(
                "prior needs finite mean and positive finite variance".into(),
            ));
        }
        Ok(Self { mu, var })
    }

    /// Label mean and `var_scale` times the label variance, per column.
    pub fn from_labels(y: &Array2<f64>, var_scale: f64) -> Result<Self> {
        if y.nrows() == 0 {
            return Err(TsnetError::Contract("prior from empty label set".into()));
        }
        let n = y.nrows() as f64;
        let mu: Vec<f64> = y.columns().into_iter().map(|c| c.sum() / n).collect();
        let var = y
            .columns()
            .into_iter()
            .zip(&mu)
            .map(|(c, m)| {
                let v = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                (var_scale * v).max(1e-6)
            })
            .collect();
        Self::new(mu, var)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_h: f64,
    pub lambda_cl: f64,
    pub lambda_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_h: 1.0,
            lambda_cl: 1.0,
            lambda_kl: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_h", self.lambda_h),
            ("lambda_cl", self.lambda_cl),
            ("lambda_kl", self.lambda_kl),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TsnetError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `mean = kd μn + (1-kd) μp`, `var = kd² Σn + (1-kd)² Σp`.
pub fn uco_combine(kd: f64, n: &GaussianDiag, p: &PriorSpec) -> Result<GaussianDiag> {
    if !(0.0..=1.0).contains(&kd) {
        return Err(TsnetError::Contract(format!("density weight {kd} outside [0, 1]")));
    }
    if n.dim() != p.dim() {
        return Err(TsnetError::shape("uco_combine", "network and prior dims differ"));
    }
    let w = 1.0 - kd;
    let mean = n.mean.iter().zip(&p.mu).map(|(a, b)| kd * a + w * b).collect();
    let var = n
        .var
        .iter()
        .zip(&p.var)
        .map(|(a, b)| kd * kd * a + w * w * b)
        .collect();
    GaussianDiag::new(mean, var)
}

/// Batched [`uco_combine`]: `kd` is `B x 1`, `mean`/`var` are `B x l`.
pub fn uco_combine_graph(
    g: &mut Graph,
    kd: NodeId,
    mean: NodeId,
    var: NodeId,
    p: &PriorSpec,
) -> Result<(NodeId, NodeId)> {
    let l = p.dim();
    let mu_p = g.constant(Array2::from_shape_vec((1, l), p.mu.clone()).expect("row"));
    let var_p = g.constant(Array2::from_shape_vec((1, l), p.var.clone()).expect("row"));
    let w = g.one_minus(kd);
    let kd2 = g.square(kd);
    let w2 = g.square(w);

    let a = g.mul_col(mean, kd)?;
    let b = g.matmul(w, mu_p)?;
    let mean = g.add(a, b)?;
    let a = g.mul_col(var, kd2)?;
    let b = g.matmul(w2, var_p)?;
    let var = g.add(a, b)?;
    Ok((mean, var))
}

/// `μ + sqrt(var) ⊙ ε`, `ε` standard normal.
pub fn reparam_sample<R: Rng + ?Sized>(gd: &GaussianDiag, rng: &mut R) -> Vec<f64> {
    gd.mean
        .iter()
        .zip(&gd.var)
        .map(|(m, v)| {
            let e: f64 = rng.sample(StandardNormal);
            m + v.sqrt() * e
        })
        .collect()
}

/// Graph form of [`reparam_sample`] with the noise `eps` (same shape as
/// `mean`) supplied by the caller and held fixed.
pub fn reparam_sample_graph(
    g: &mut Graph,
    mean: NodeId,
    var: NodeId,
    eps: Array2<f64>,
) -> Result<NodeId> {
    let e = g.constant(eps);
    let sd = g.sqrt(var);
    let s = g.mul(sd, e)?;
    g.add(mean, s)
}

/// `λH Σ log var + Σ (y - ỹ)² / var` for one sample.
pub fn hmse_loss(y: &[f64], y_tilde: &[f64], var: &[f64], lambda_h: f64) -> Result<f64> {
    if y.len() != y_tilde.len() || y.len() != var.len() {
        return Err(TsnetError::shape("hmse_loss", "length mismatch"));
    }
    if var.iter().any(|v| !(*v > 0.0)) {
        return Err(TsnetError::Contract("hmse_loss needs positive variances".into()));
    }
    Ok(y.iter()
        .zip(y_tilde)
        .zip(var)
        .map(|((a, b), v)| lambda_h * v.ln() + (a - b).powi(2) / v)
        .sum())
}

/// Batch-averaged [`hmse_loss`]; all operands `B x l`.
pub fn hmse_loss_graph(
    g: &mut Graph,
    y: NodeId,
    y_tilde: NodeId,
    var: NodeId,
    lambda_h: f64,
) -> Result<NodeId> {
    let batch = g.shape(y).0.max(1) as f64;
    let lv = g.ln(var);
    let lv = g.scale(lv, lambda_h);
    let r = g.sub(y, y_tilde)?;
    let r2 = g.square(r);
    let q = g.div(r2, var)?;
    let t = g.add(lv, q)?;
    let s = g.sum_all(t);
    Ok(g.scale(s, 1.0 / batch))
}

/// `λCL·cl + λKL·kl + hmse`.
pub fn total_loss(cl: f64, kl: f64, hmse: f64, w: &LossWeights) -> f64 {
    w.lambda_cl * cl + w.lambda_kl * kl + hmse
}

pub fn total_loss_graph(
    g: &mut Graph,
    cl: Option<NodeId>,
    kl: Option<NodeId>,
    hmse: NodeId,
    w: &LossWeights,
) -> Result<NodeId> {
    let mut acc = hmse;
    if let Some(cl) = cl {
        let t = g.scale(cl, w.lambda_cl);
        acc = g.add(acc, t)?;
    }
    if let Some(kl) = kl {
        let t = g.scale(kl, w.lambda_kl);
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gd(m: f64, v: f64) -> GaussianDiag {
        GaussianDiag::new(vec![m], vec![v]).unwrap()
    }

    #[test]
    fn combine_endpoints_and_midpoint() {
        let n = gd(2.0, 1.0);
        let p = PriorSpec::new(vec![0.0], vec![4.0]).unwrap();
        assert_eq!(uco_combine(1.0, &n, &p).unwrap(), n);
        assert_eq!(uco_combine(0.0, &n, &p).unwrap(), gd(0.0, 4.0));
        let mid = uco_combine(0.5, &n, &p).unwrap();
        assert_eq!((mid.mean[0], mid.var[0]), (1.0, 1.25));
        assert!(uco_combine(1.5, &n, &p).is_err());
        assert!(uco_combine(-0.1, &n, &p).is_err());
    }

    #[test]
    fn hmse_hand_cases() {
        assert_eq!(hmse_loss(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0], 1.0).unwrap(), 0.0);
        let v = hmse_loss(&[1.0], &[0.0], &[0.5], 1.0).unwrap();
        assert!((v - (0.5f64.ln() + 2.0)).abs() < 1e-12);
        assert!((v - 1.3069).abs() < 1e-4);
        assert_eq!(hmse_loss(&[3.0, 1.0], &[1.0, 0.0], &[1.0, 1.0], 0.7).unwrap(), 5.0);
        assert!(hmse_loss(&[0.0], &[0.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights {
            lambda_h: 1.0,
            lambda_cl: 0.5,
            lambda_kl: 0.25,
        };
        assert_eq!(total_loss(1.0, 2.0, 3.0, &w), 4.0);
        let zero = LossWeights {
            lambda_cl: 0.0,
            lambda_kl: 0.0,
            ..w
        };
        assert_eq!(total_loss(7.0, 9.0, 3.0, &zero), 3.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &LossWeights::default()), 0.0);
    }

    #[test]
    fn graph_forms_match_scalar_forms() {
        let mut g = Graph::new();
        let kd = g.constant(Array2::from_shape_vec((2, 1), vec![0.3, 0.9]).unwrap());
        let mean = g.constant(Array2::from_shape_vec((2, 1), vec![1.0, -2.0]).unwrap());
        let var = g.constant(Array2::from_shape_vec((2, 1), vec![0.5, 2.0]).unwrap());
        let p = PriorSpec::new(vec![0.25], vec![3.0]).unwrap();
        let (m, v) = uco_combine_graph(&mut g, kd, mean, var, &p).unwrap();
        for (b, (k, mu, s)) in [(0.3, 1.0, 0.5), (0.9, -2.0, 2.0)].into_iter().enumerate() {
            let want = uco_combine(k, &gd(mu, s), &p).unwrap();
            assert!((g.value(m)[[b, 0]] - want.mean[0]).abs() < 1e-15);
            assert!((g.value(v)[[b, 0]] - want.var[0]).abs() < 1e-15);
        }
        let y = g.constant(Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap());
        let h = hmse_loss_graph(&mut g, y, m, v, 1.0).unwrap();
        let vals = g.value(m).clone();
        let vars = g.value(v).clone();
        let want = (hmse_loss(&[0.0], &[vals[[0, 0]]], &[vars[[0, 0]]], 1.0).unwrap()
            + hmse_loss(&[1.0], &[vals[[1, 0]]], &[vars[[1, 0]]], 1.0).unwrap())
            / 2.0;
        assert!((g.scalar(h) - want).abs() < 1e-12);
    }

    #[test]
    fn reparam_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = reparam_sample(&gd(3.0, 1e-30), &mut rng);
        assert!((s[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn prior_from_labels() {
        let y = Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = PriorSpec::from_labels(&y, 4.0).unwrap();
        assert_eq!(p.mu, vec![2.5]);
        assert!((p.var[0] - 5.0).abs() < 1e-12);
    }
}
