use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyKind {
    Toy1d,
    Toy2d,
}

/// Noisy training set plus a noise-free evaluation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyProblem {
    pub kind: ToyKind,
    /// Raw (unsplit, unstandardized) training data.
    pub train: Dataset,
    pub eval_x: Array2<f64>,
    pub eval_y: Array2<f64>,
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Noise-free 1D target.
pub fn toy1d_f(x: f64) -> f64 {
    (0.06 * x).exp() + 0.5 * (0.2 * x).exp() + (2.0 * x).sin() + (4.0 * x).sin() + (5.0 * x).sin()
}

/// Standard deviations `(input, output)` of the 1D noise at `x`. The output
/// factor has a pole at `x = -1`; its magnitude is capped at 5.
pub fn toy1d_noise_sd(x: f64) -> (f64, f64) {
    let si = 0.2 * logistic(x - 2.0);
    let so = (0.5 / (1.0 - (x + 1.0).exp())).clamp(-5.0, 5.0).abs();
    (si, so)
}

/// Noise-free 2D target.
pub fn toy2d_f(x: f64, y: f64) -> f64 {
    0.5 * (0.03 * y).exp() * x.sin() + (0.06 * x).exp() * (0.8 * y).cos()
}

/// Standard deviations `(input, output)` of the 2D noise at `(x, y)`.
pub fn toy2d_noise_sd(x: f64, y: f64) -> (f64, f64) {
    let si = ((0.2 * (0.3 * y).sin() + 0.4) / (1.0 + (-(x + 1.0)).exp())).abs();
    let so = ((0.15 * (0.3 * x).sin() * (0.8 * y).sin() + 1.1) / (1.0 + (2.0 - y).exp())).abs();
    (si, so)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// 150 points around -1 (sd 1.5) and 150 around 2 (sd 1.1); labels
/// `f(x + Ni) + No`. Evaluation: 300 evenly spaced noise-free points on
/// `[-7, 7]`.
pub fn gen_toy1d(seed: u64) -> Result<ToyProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..300)
        .map(|i| {
            if i < 150 {
                -1.0 + 1.5 * normal(&mut rng)
            } else {
                2.0 + 1.1 * normal(&mut rng)
            }
        })
        .collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let (si, so) = toy1d_noise_sd(x);
            toy1d_f(x + si * normal(&mut rng)) + so * normal(&mut rng)
        })
        .collect();
    let train = Dataset::new(
        Array2::from_shape_vec((300, 1), xs).expect("300"),
        Array2::from_shape_vec((300, 1), ys).expect("300"),
        vec!["x".into()],
        vec!["y".into()],
    )?;
    let eval_x = Array2::from_shape_fn((300, 1), |(i, _)| -7.0 + 14.0 * i as f64 / 299.0);
    let eval_y = eval_x.mapv(toy1d_f);
    Ok(ToyProblem {
        kind: ToyKind::Toy1d,
        train,
        eval_x,
        eval_y,
    })
}

/// Symmetrizes `a` and floors its eigenvalues at `1e-3`.
pub fn repair_covariance(a: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let off = 0.5 * (a[0][1] + a[1][0]);
    let (p, q) = (a[0][0], a[1][1]);
    // eigen-decomposition of [[p, off], [off, q]]
    let mid = 0.5 * (p + q);
    let rad = (0.25 * (p - q).powi(2) + off * off).sqrt();
    let (l1, l2) = (mid + rad, mid - rad);
    if l2 >= 1e-3 {
        return [[p, off], [off, q]];
    }
    let theta = 0.5 * (2.0 * off).atan2(p - q);
    let (c, s) = (theta.cos(), theta.sin());
    let (l1, l2) = (l1.max(1e-3), l2.max(1e-3));
    [
        [l1 * c * c + l2 * s * s, (l1 - l2) * c * s],
        [(l1 - l2) * c * s, l1 * s * s + l2 * c * c],
    ]
}

fn cholesky(c: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let l00 = c[0][0].sqrt();
    let l10 = c[1][0] / l00;
    let l11 = (c[1][1] - l10 * l10).sqrt();
    [[l00, 0.0], [l10, l11]]
}

/// 100/150/50 points from three Gaussian clusters. Labels
/// `f(x + Ni, y + Ni) + No`, with the same `Ni` draw on both coordinates.
/// Evaluation: a 50 x 50 noise-free grid on `[-10, 10]²`.
pub fn gen_toy2d(seed: u64) -> Result<ToyProblem> {
    let clusters: [(usize, [f64; 2], [[f64; 2]; 2]); 3] = [
        (100, [-2.9, -3.4], [[2.5, 2.0], [0.5, 2.3]]),
        (150, [2.5, 2.5], [[3.0, 0.0], [0.0, 2.5]]),
        (50, [5.0, -5.0], [[1.2, -0.5], [-0.7, 1.7]]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(600);
    for (count, mean, cov) in clusters {
        let l = cholesky(repair_covariance(cov));
        for _ in 0..count {
            let (z0, z1) = (normal(&mut rng), normal(&mut rng));
            pts.push(mean[0] + l[0][0] * z0);
            pts.push(mean[1] + l[1][0] * z0 + l[1][1] * z1);
        }
    }
    let x = Array2::from_shape_vec((300, 2), pts).expect("300 x 2");
    let y = Array2::from_shape_fn((300, 1), |(i, _)| {
        let (a, b) = (x[[i, 0]], x[[i, 1]]);
        let (si, so) = toy2d_noise_sd(a, b);
        let ni = si * normal(&mut rng);
        toy2d_f(a + ni, b + ni) + so * normal(&mut rng)
    });
    let train = Dataset::new(x, y, vec!["x".into(), "y".into()], vec!["z".into()])?;
    let eval_x = Array2::from_shape_fn((2500, 2), |(i, j)| {
        let k = if j == 0 { i / 50 } else { i % 50 };
        -10.0 + 20.0 * k as f64 / 49.0
    });
    let eval_y = Array2::from_shape_fn((2500, 1), |(i, _)| toy2d_f(eval_x[[i, 0]], eval_x[[i, 1]]));
    Ok(ToyProblem {
        kind: ToyKind::Toy2d,
        train,
        eval_x,
        eval_y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_points() {
        assert!((toy1d_f(0.0) - 1.5).abs() < 1e-15);
        assert!((toy2d_f(0.0, 0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sizes() {
        let p = gen_toy1d(0).unwrap();
        assert_eq!((p.train.len(), p.eval_x.nrows()), (300, 300));
        assert_eq!((p.eval_x[[0, 0]], p.eval_x[[299, 0]]), (-7.0, 7.0));
        let p = gen_toy2d(0).unwrap();
        assert_eq!((p.train.len(), p.eval_x.nrows()), (300, 2500));
    }

    #[test]
    fn covariance_repair() {
        let c = repair_covariance([[1.2, -0.5], [-0.7, 1.7]]);
        assert_eq!(c, [[1.2, -0.6], [-0.6, 1.7]]);
        let bad = repair_covariance([[1.0, 3.0], [3.0, 1.0]]);
        let det = bad[0][0] * bad[1][1] - bad[0][1] * bad[1][0];
        assert!(bad[0][1] == bad[1][0] && det > 0.0 && bad[0][0] > 0.0);
        // eigenvalues 4 and floor
        assert!((bad[0][0] + bad[1][1] - (4.0 + 1e-3)).abs() < 1e-12);
    }

    #[test]
    fn pole_is_capped() {
        let (_, so) = toy1d_noise_sd(-1.0 + 1e-12);
        assert_eq!(so, 5.0);
        assert!(toy1d_noise_sd(-1.0).1.is_finite());
    }

    #[test]
    fn reproducible() {
        assert_eq!(gen_toy1d(4).unwrap(), gen_toy1d(4).unwrap());
        assert_ne!(gen_toy1d(4).unwrap().train.y, gen_toy1d(5).unwrap().train.y);
    }
}
