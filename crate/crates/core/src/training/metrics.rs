use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TsnetError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// Mean Gaussian negative log-likelihood without the `ln √(2π)` constant.
    pub nll: f64,
}

/// MSE, MAE and NLL averaged over samples and output dimensions.
pub fn metrics(y: &Array2<f64>, mu: &Array2<f64>, var: &Array2<f64>) -> Result<Metrics> {
    if y.dim() != mu.dim() || y.dim() != var.dim() {
        return Err(TsnetError::shape(
            "metrics",
            format!("y {:?}, mu {:?}, var {:?}", y.dim(), mu.dim(), var.dim()),
        ));
    }
    if y.is_empty() {
        return Err(TsnetError::Contract("metrics over an empty set".into()));
    }
    if var.iter().any(|v| !(*v > 0.0)) {
        return Err(TsnetError::Contract("NLL needs positive variances".into()));
    }
    let n = y.len() as f64;
    let (mut se, mut ae, mut nll) = (0.0, 0.0, 0.0);
    for ((a, b), v) in y.iter().zip(mu).zip(var) {
        let r = a - b;
        se += r * r;
        ae += r.abs();
        nll += 0.5 * v.ln() + r * r / (2.0 * v);
    }
    Ok(Metrics {
        mse: se / n,
        mae: ae / n,
        nll: nll / n,
    })
}

/// Mean squared error only.
pub fn mse(y: &Array2<f64>, mu: &Array2<f64>) -> Result<f64> {
    if y.dim() != mu.dim() || y.is_empty() {
        return Err(TsnetError::shape("mse", format!("{:?} vs {:?}", y.dim(), mu.dim())));
    }
    Ok(y.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_cases() {
        let m = metrics(&array![[1.0]], &array![[1.0]], &array![[1.0]]).unwrap();
        assert_eq!((m.mse, m.mae, m.nll), (0.0, 0.0, 0.0));
        let m = metrics(&array![[2.0]], &array![[0.0]], &array![[1.0]]).unwrap();
        assert_eq!((m.mse, m.mae, m.nll), (4.0, 2.0, 2.0));
        assert!(metrics(&array![[2.0]], &array![[0.0]], &array![[0.0]]).is_err());
    }

    #[test]
    fn sign_flip_symmetry() {
        let y = array![[0.3], [-1.2], [2.0]];
        let mu = array![[0.1], [-1.0], [1.5]];
        let var = array![[0.5], [2.0], [0.1]];
        assert_eq!(metrics(&y, &mu, &var).unwrap(), metrics(&-&y, &-&mu, &var).unwrap());
    }
}
