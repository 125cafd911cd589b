//! Data-density perception: KNN density targets, an attention-based density
//! scorer trained to match them by KL divergence, and the calibrated density
//! weight used when blending with the prior.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{glorot_uniform, Graph, NodeId, ParamStore};
use crate::error::{Result, TsnetError};

/// Floor on `rho` inside the KL divergence.
pub const RHO_FLOOR: f64 = 1e-12;

/// A point set with a probability per point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    pub points: Array2<f64>,
    pub rho: Vec<f64>,
}

/// Converts KNN inverse-distance sums into softmax logits.
///
/// Each neighbor contributes `1 / (d² + epsilon)` and the sum is multiplied
/// by `logit_scale`. [`DensityKernel::EXACT`] is the bare inverse-distance
/// sum with a tiny regularizer. On real data its logits span several orders
/// of magnitude and the softmax collapses onto one point, so training uses
/// [`DensityKernel::adaptive`], whose logits stay in `[0, contrast]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityKernel {
    pub epsilon: f64,
    pub logit_scale: f64,
}

impl DensityKernel {
    pub const EXACT: DensityKernel = DensityKernel {
        epsilon: 1e-8,
        logit_scale: 1.0,
    };

    /// `epsilon = width *` the median squared distance to the `k`-th
    /// neighbor over `reference`, `logit_scale = contrast * epsilon / k`.
    /// Logits lie in `(0, contrast]`: a point whose neighbors all sit at the
    /// typical `k`-th distance scores `contrast * width / (1 + width)`, an
    /// isolated point about 0.
    pub fn adaptive(reference: &Array2<f64>, k: usize, contrast: f64, width: f64) -> Result<Self> {
        check_k(reference.nrows(), k)?;
        let mut kth: Vec<f64> = (0..reference.nrows())
            .map(|i| {
                let mut d = sq_dists(reference, reference.row(i).as_slice().expect("row"), Some(i));
                d.select_nth_unstable_by(k - 1, f64::total_cmp);
                d[k - 1]
            })
            .collect();
        kth.sort_by(f64::total_cmp);
        let epsilon = (width * kth[kth.len() / 2]).max(1e-8);
        Ok(Self {
            epsilon,
            logit_scale: contrast * epsilon / k as f64,
        })
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || n <= k {
        return Err(TsnetError::Contract(format!(
            "KNN density needs n > K >= 1, got n={n}, K={k}"
        )));
    }
    Ok(())
}

fn sq_dists(reference: &Array2<f64>, q: &[f64], exclude: Option<usize>) -> Vec<f64> {
    reference
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != exclude)
        .map(|(_, r)| r.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum())
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// KNN logits of every `queries` row against `reference`. With
/// `self_exclude`, query row `i` is taken to be reference row `i` for
/// `i < reference.nrows()` and that row is skipped as its own neighbor.
pub fn knn_logits(
    queries: &Array2<f64>,
    reference: &Array2<f64>,
    k: usize,
    kernel: DensityKernel,
    self_exclude: bool,
) -> Result<Vec<f64>> {
    check_k(reference.nrows(), k)?;
    if queries.ncols() != reference.ncols() {
        return Err(TsnetError::shape("knn_logits", "query and reference widths differ"));
    }
    Ok(queries
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, q)| {
            let exclude = (self_exclude && i < reference.nrows()).then_some(i);
            let mut d = sq_dists(reference, q.as_slice().expect("row"), exclude);
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            kernel.logit_scale * d[..k].iter().map(|d2| 1.0 / (d2 + kernel.epsilon)).sum::<f64>()
        })
        .collect())
}

/// Softmax-normalized inverse-distance density of each point among the others.
pub fn knn_density(points: &Array2<f64>, k: usize) -> Result<DensityField> {
    let raw = knn_logits(points, points, k, DensityKernel::EXACT, true)?;
    Ok(DensityField {
        points: points.clone(),
        rho: softmax(&raw),
    })
}

/// `X` stacked over one Gaussian-perturbed copy of each row. The per-feature
/// perturbation std is `scale * std(feature)`, or `scale * 1e-3` for a
/// constant feature.
pub fn augment_features<R: Rng + ?Sized>(
    x: &Array2<f64>,
    scale: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if x.nrows() < 2 {
        return Err(TsnetError::Contract("augmentation needs at least two rows".into()));
    }
    let sd: Vec<f64> = x
        .std_axis(Axis(0), 0.0)
        .iter()
        .map(|&s| if s > 0.0 { scale * s } else { scale * 1e-3 })
        .collect();
    let mut aug = x.clone();
    for mut row in aug.rows_mut() {
        for (v, s) in row.iter_mut().zip(&sd) {
            let e: f64 = rng.sample(StandardNormal);
            *v += s * e;
        }
    }
    ndarray::concatenate(Axis(0), &[x.view(), aug.view()])
        .map_err(|e| TsnetError::shape("augment_features", e.to_string()))
}

/// Attention-based density scorer.
///
/// Each of the `m` features becomes a token `sigmoid(x_j u_j + c_j)` in
/// `R^d`. One head of scaled dot-product self-attention runs over a point's
/// own tokens, with a residual connection; the tokens are mean-pooled and a
/// one-hidden-layer sigmoid head maps them to a raw score. Scoring is
/// therefore a function of the point alone.
///
/// Tensor order: `[U (m x d), C (m x d), Wq, Wk, Wv (d x d), Wh (d x h),
/// bh (1 x h), wo (h x 1), bo (1 x 1)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityNetParams {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub params: ParamStore,
}

impl DensityNetParams {
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || embed_dim < 2 || hidden == 0 {
            return Err(TsnetError::Config(format!(
                "density net needs m >= 1, d >= 2, hidden >= 1 (got {input_dim}, {embed_dim}, {hidden})"
            )));
        }
        let (m, d, h) = (input_dim, embed_dim, hidden);
        let tensors = vec![
            Array2::from_shape_fn((m, d), |_| rng.random_range(-1.0..1.0)),
            Array2::from_shape_fn((m, d), |_| rng.random_range(-1.0..1.0)),
            glorot_uniform(rng, d, d),
            glorot_uniform(rng, d, d),
            glorot_uniform(rng, d, d),
            glorot_uniform(rng, d, h),
            Array2::zeros((1, h)),
            glorot_uniform(rng, h, 1),
            Array2::zeros((1, 1)),
        ];
        Ok(Self {
            input_dim,
            embed_dim,
            hidden,
            params: ParamStore::new(tensors),
        })
    }

    fn check(&self, g: &Graph, p: &[NodeId], x: NodeId) -> Result<()> {
        let (m, d, h) = (self.input_dim, self.embed_dim, self.hidden);
        let want = [(m, d), (m, d), (d, d), (d, d), (d, d), (d, h), (1, h), (h, 1), (1, 1)];
        if p.len() != want.len() || p.iter().zip(want).any(|(id, s)| g.shape(*id) != s) {
            return Err(TsnetError::shape("density net", "bound parameters do not match dims"));
        }
        if g.shape(x).1 != m {
            return Err(TsnetError::shape(
                "density net",
                format!("input width {}, expected {m}", g.shape(x).1),
            ));
        }
        Ok(())
    }
}

/// Raw scores `n x 1` for `x: n x m`.
pub fn density_scores_graph(
    g: &mut Graph,
    dnp: &DensityNetParams,
    p: &[NodeId],
    x: NodeId,
) -> Result<NodeId> {
    dnp.check(g, p, x)?;
    let n = g.shape(x).0;
    let m = dnp.input_dim;
    let xf = g.flatten(x);
    let u = g.tile_rows(p[0], n);
    let c = g.tile_rows(p[1], n);
    let z = g.mul_col(u, xf)?;
    let z = g.add(z, c)?;
    let tokens = g.sigmoid(z);

    let q = g.matmul(tokens, p[2])?;
    let k = g.matmul(tokens, p[3])?;
    let v = g.matmul(tokens, p[4])?;
    let att = g.block_matmul_nt(q, k, m)?;
    let att = g.scale(att, 1.0 / (dnp.embed_dim as f64).sqrt());
    let att = g.softmax_rows(att);
    let o = g.block_matmul(att, v, m)?;
    let o = g.add(o, tokens)?;
    let pooled = g.group_sum(o, m)?;
    let pooled = g.scale(pooled, 1.0 / m as f64);

    let h = g.matmul(pooled, p[5])?;
    let h = g.add_row(h, p[6])?;
    let h = g.sigmoid(h);
    let s = g.matmul(h, p[7])?;
    g.add_row(s, p[8])
}

/// Raw scores for every row of `x`.
pub fn density_scores(dnp: &DensityNetParams, x: &Array2<f64>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = dnp.params.bind_const(&mut g);
    let xn = g.constant(x.clone());
    let s = density_scores_graph(&mut g, dnp, &p, xn)?;
    Ok(g.value(s).column(0).to_vec())
}

/// Softmax of the raw scores over the rows of `x`.
pub fn density_net_forward(dnp: &DensityNetParams, x: &Array2<f64>) -> Result<Vec<f64>> {
    if x.nrows() == 0 {
        return Err(TsnetError::Contract("density net needs at least one point".into()));
    }
    Ok(softmax(&density_scores(dnp, x)?))
}

fn check_probs(v: &[f64], name: &str) -> Result<()> {
    let s: f64 = v.iter().sum();
    if v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(TsnetError::Contract(format!("{name} is not a probability vector")));
    }
    Ok(())
}

/// `KL(kappa ‖ rho) = Σ kappa log(kappa / rho)` with `rho` floored.
pub fn kl_loss(kappa: &[f64], rho: &[f64]) -> Result<f64> {
    if kappa.len() != rho.len() {
        return Err(TsnetError::shape(
            "kl_loss",
            format!("{} vs {} entries", kappa.len(), rho.len()),
        ));
    }
    check_probs(kappa, "kappa")?;
    check_probs(rho, "rho")?;
    Ok(kappa
        .iter()
        .zip(rho)
        .filter(|(k, _)| **k > 0.0)
        .map(|(k, r)| k * (k / r.max(RHO_FLOOR)).ln())
        .sum())
}

/// KL between the softmax of `scores` (`n x 1`) and a fixed target `rho`.
pub fn kl_loss_graph(g: &mut Graph, scores: NodeId, rho: &[f64]) -> Result<NodeId> {
    let n = g.shape(scores).0;
    if g.shape(scores) != (rho.len(), 1) {
        return Err(TsnetError::shape("kl_loss_graph", "scores must be n x 1 matching rho"));
    }
    let lse = g.logsumexp(scores);
    let neg = g.neg(lse);
    let log_k = g.add_scalar_node(scores, neg)?;
    let kappa = g.exp(log_k);
    let log_rho = g.constant(Array2::from_shape_fn((n, 1), |(i, _)| rho[i].max(RHO_FLOOR).ln()));
    let diff = g.sub(log_k, log_rho)?;
    let t = g.mul(kappa, diff)?;
    Ok(g.sum_all(t))
}

/// Raw-score range over the training set, mapping scores to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityCalibration {
    pub s_min: f64,
    pub s_max: f64,
}

impl DensityCalibration {
    pub fn new(s_min: f64, s_max: f64) -> Result<Self> {
        if !(s_min.is_finite() && s_max.is_finite() && s_min <= s_max) {
            return Err(TsnetError::Contract(format!(
                "calibration needs finite s_min <= s_max, got [{s_min}, {s_max}]"
            )));
        }
        Ok(Self { s_min, s_max })
    }

    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::new(lo, hi)
    }

    fn denom(&self) -> f64 {
        self.s_max - self.s_min + 1e-12
    }

    /// A degenerate range (`s_min == s_max`) maps every score to 0.
    pub fn weight(&self, s: f64) -> f64 {
        if self.s_max <= self.s_min {
            return 0.0;
        }
        ((s - self.s_min) / self.denom()).clamp(0.0, 1.0)
    }

    /// Graph form of [`DensityCalibration::weight`] over a score column.
    pub fn weight_graph(&self, g: &mut Graph, scores: NodeId) -> NodeId {
        if self.s_max <= self.s_min {
            return g.scale(scores, 0.0);
        }
        let t = g.offset(scores, -self.s_min);
        let t = g.scale(t, 1.0 / self.denom());
        g.clamp(t, 0.0, 1.0)
    }
}

/// Density weight in `[0, 1]` for one point.
pub fn k_d(dnp: &DensityNetParams, cal: &DensityCalibration, x: &[f64]) -> Result<f64> {
    let row = Array2::from_shape_vec((1, x.len()), x.to_vec())
        .map_err(|e| TsnetError::shape("k_d", e.to_string()))?;
    Ok(cal.weight(density_scores(dnp, &row)?[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_point_hand_case() {
        let pts = array![[0.0], [1.0], [3.0]];
        let f = knn_density(&pts, 1).unwrap();
        let raw = [1.0 / (1.0 + 1e-8), 1.0 / (1.0 + 1e-8), 1.0 / (4.0 + 1e-8)];
        let z: f64 = raw.iter().map(|r: &f64| r.exp()).sum();
        for (r, want) in f.rho.iter().zip(raw.iter().map(|r| r.exp() / z)) {
            assert!((r - want).abs() < 1e-12);
        }
        assert!((f.rho[0] - 0.40447).abs() < 1e-5 && (f.rho[2] - 0.19106).abs() < 1e-5);
    }

    #[test]
    fn two_points_and_duplicates() {
        let f = knn_density(&array![[2.0, 5.0], [-1.0, 0.5]], 1).unwrap();
        assert_eq!(f.rho, vec![0.5, 0.5]);
        let f = knn_density(&array![[1.0], [1.0], [4.0]], 1).unwrap();
        assert!(f.rho.iter().all(|r| r.is_finite()));
        assert!(knn_density(&array![[1.0], [2.0]], 2).is_err());
    }

    #[test]
    fn adaptive_kernel_bounds_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((200, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let kern = DensityKernel::adaptive(&x, 5, 4.0, 2.0).unwrap();
        let l = knn_logits(&x, &x, 5, kern, true).unwrap();
        assert!(l.iter().all(|&v| v > 0.0 && v <= 4.0 + 1e-12));
    }

    #[test]
    fn augmentation_shape_and_zero_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = array![[1.0, 2.0], [3.0, 2.0], [0.0, 2.0]];
        let a = augment_features(&x, 0.0, &mut rng).unwrap();
        assert_eq!(a.nrows(), 6);
        assert_eq!(a.slice(ndarray::s![3.., ..]), x);
        assert!(augment_features(&array![[1.0]], 0.1, &mut rng).is_err());
    }

    #[test]
    fn kl_hand_cases() {
        assert_eq!(kl_loss(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let v = kl_loss(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.5108).abs() < 1e-4);
        assert!(kl_loss(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn net_softmax_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dnp = DensityNetParams::init(3, 4, 5, &mut rng).unwrap();
        assert_eq!(density_net_forward(&dnp, &array![[0.1, 0.2, 0.3]]).unwrap(), vec![1.0]);
        let x = array![[0.1, 0.2, 0.3], [-1.0, 0.0, 2.0], [0.5, 0.5, -0.5]];
        let k = density_net_forward(&dnp, &x).unwrap();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let perm = array![[0.5, 0.5, -0.5], [0.1, 0.2, 0.3], [-1.0, 0.0, 2.0]];
        let kp = density_net_forward(&dnp, &perm).unwrap();
        assert!((kp[0] - k[2]).abs() < 1e-15 && (kp[1] - k[0]).abs() < 1e-15);
    }

    #[test]
    fn kl_graph_matches_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dnp = DensityNetParams::init(2, 3, 3, &mut rng).unwrap();
        let x = array![[0.1, -0.3], [1.2, 0.4], [-0.7, 0.9]];
        let rho = [0.5, 0.3, 0.2];
        let kappa = density_net_forward(&dnp, &x).unwrap();
        let mut g = Graph::new();
        let p = dnp.params.bind_const(&mut g);
        let xn = g.constant(x.clone());
        let s = density_scores_graph(&mut g, &dnp, &p, xn).unwrap();
        let kl = kl_loss_graph(&mut g, s, &rho).unwrap();
        assert!((g.scalar(kl) - kl_loss(&kappa, &rho).unwrap()).abs() < 1e-12);

        let err = finite_difference_check(
            |g: &mut Graph, ids: &[Vec<NodeId>]| {
                let xn = g.constant(x.clone());
                let s = density_scores_graph(g, &dnp, &ids[0], xn)?;
                kl_loss_graph(g, s, &rho)
            },
            &[&dnp.params],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn calibration_endpoints() {
        let c = DensityCalibration::new(-1.0, 3.0).unwrap();
        assert_eq!(c.weight(-1.0), 0.0);
        assert!((c.weight(3.0) - 1.0).abs() < 1e-12);
        assert!((c.weight(1.0) - 0.5).abs() < 1e-12);
        assert_eq!(c.weight(-10.0), 0.0);
        assert_eq!(c.weight(10.0), 1.0);
        assert!(DensityCalibration::new(2.0, 1.0).is_err());
        let degenerate = DensityCalibration::new(0.5, 0.5).unwrap();
        assert_eq!(degenerate.weight(0.5), 0.0);
        assert_eq!(degenerate.weight(7.0), 0.0);
    }
}
