//! Deep Taylor Block: predicted mean plus a variance composed from feature
//! noise carried through the mean network's input Jacobian and additive
//! output noise.
//!
//! For an input `x` with mean network `F`, feature-noise head `Σi` and
//! output-noise head `Σo`, output `k` gets
//!
//! ```text
//! var_k = Σ_i (∂F_k/∂x_i)² · Σi_i(x) + Σo_k(x)
//! ```
//!
//! i.e. the diagonal of `Jᵀ diag(Σi) J + diag(Σo)`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{mlp_graph, mlp_graph_with_jacobian, Graph, Mlp, MlpSpec, NodeId, ParamStore};
use crate::error::{Result, TsnetError};

/// Lower bound added to every predicted variance.
pub const VAR_FLOOR: f64 = 1e-6;
/// Raw log-variance outputs are clamped to `[-RAW_CLAMP, RAW_CLAMP]`.
pub const RAW_CLAMP: f64 = 12.0;

/// Diagonal Gaussian: per-dimension mean and variance (not std).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianDiag {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianDiag {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(TsnetError::shape(
                "GaussianDiag",
                format!("mean has {} entries, var has {}", mean.len(), var.len()),
            ));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(TsnetError::Contract("GaussianDiag mean must be finite".into()));
        }
        if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(TsnetError::Contract(
                "GaussianDiag variances must be finite and positive".into(),
            ));
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `exp(clamp(raw, -12, 12)) + VAR_FLOOR`, elementwise.
pub fn variance_head(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.iter().any(|r| r.is_nan()) {
        return Err(TsnetError::Contract("variance head received NaN".into()));
    }
    Ok(raw
        .iter()
        .map(|r| r.clamp(-RAW_CLAMP, RAW_CLAMP).exp() + VAR_FLOOR)
        .collect())
}

/// Graph form of [`variance_head`].
pub fn variance_head_graph(g: &mut Graph, raw: NodeId) -> NodeId {
    let c = g.clamp(raw, -RAW_CLAMP, RAW_CLAMP);
    let e = g.exp(c);
    g.offset(e, VAR_FLOOR)
}

/// The three subnetworks of the block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtbParams {
    /// Mean network `m -> l`.
    pub mu: Mlp,
    /// Raw log-variance of feature noise, `m -> m`.
    pub sigma_in: Mlp,
    /// Raw log-variance of output noise, `m -> l`.
    pub sigma_out: Mlp,
}

impl DtbParams {
    pub fn new(mu: Mlp, sigma_in: Mlp, sigma_out: Mlp) -> Result<Self> {
        let m = mu.spec.input_dim();
        let l = mu.spec.output_dim();
        let ok = sigma_in.spec.input_dim() == m
            && sigma_out.spec.input_dim() == m
            && sigma_in.spec.output_dim() == m
            && sigma_out.spec.output_dim() == l;
        if !ok {
            return Err(TsnetError::shape(
                "DtbParams",
                format!(
                    "mean {:?}, feature-noise {:?}, output-noise {:?} do not form m->l, m->m, m->l",
                    mu.spec.layer_widths(),
                    sigma_in.spec.layer_widths(),
                    sigma_out.spec.layer_widths()
                ),
            ));
        }
        Ok(Self {
            mu,
            sigma_in,
            sigma_out,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        m: usize,
        l: usize,
        mu_hidden: &[usize],
        sigma_hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mu = Mlp::init(MlpSpec::with_hidden(m, mu_hidden, l)?, rng);
        let si = Mlp::init(MlpSpec::with_hidden(m, sigma_hidden, m)?, rng);
        let so = Mlp::init(MlpSpec::with_hidden(m, sigma_hidden, l)?, rng);
        Self::new(mu, si, so)
    }

    pub fn input_dim(&self) -> usize {
        self.mu.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mu.spec.output_dim()
    }

    /// Stores in binding order: mean, feature-noise, output-noise.
    pub fn stores(&self) -> [&ParamStore; 3] {
        [&self.mu.params, &self.sigma_in.params, &self.sigma_out.params]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore; 3] {
        [
            &mut self.mu.params,
            &mut self.sigma_in.params,
            &mut self.sigma_out.params,
        ]
    }
}

/// Batched block on the graph. `ids` are the bound stores in
/// [`DtbParams::stores`] order; `x` is `B x m`. Returns `(mean, var)`, both
/// `B x l`.
pub fn dtb_graph(
    g: &mut Graph,
    dtb: &DtbParams,
    ids: &[Vec<NodeId>],
    x: NodeId,
) -> Result<(NodeId, NodeId)> {
    if ids.len() != 3 {
        return Err(TsnetError::shape("dtb", "expected three bound parameter stores"));
    }
    let m = dtb.input_dim();
    let (mean, jac) = mlp_graph_with_jacobian(g, &dtb.mu.spec, &ids[0], x)?;
    let raw_in = mlp_graph(g, &dtb.sigma_in.spec, &ids[1], x)?;
    let raw_out = mlp_graph(g, &dtb.sigma_out.spec, &ids[2], x)?;
    let var_in = variance_head_graph(g, raw_in);
    let var_out = variance_head_graph(g, raw_out);

    // jac rows are (sample, feature); flattening var_in row-major lines up
    // the same (sample, feature) order.
    let var_in_col = g.flatten(var_in);
    let j2 = g.square(jac);
    let weighted = g.mul_col(j2, var_in_col)?;
    let carried = g.group_sum(weighted, m)?;
    let var = g.add(carried, var_out)?;
    Ok((mean, var))
}

/// Block output at a single input.
pub fn dtb_forward(dtb: &DtbParams, x: &[f64]) -> Result<GaussianDiag> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(TsnetError::Contract("dtb input must be finite".into()));
    }
    if x.len() != dtb.input_dim() {
        return Err(TsnetError::shape(
            "dtb",
            format!("input width {}, expected {}", x.len(), dtb.input_dim()),
        ));
    }
    let mut g = Graph::new();
    let ids: Vec<Vec<NodeId>> = dtb.stores().iter().map(|s| s.bind_const(&mut g)).collect();
    let xn = g.constant(Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row"));
    let (mean, var) = dtb_graph(&mut g, dtb, &ids, xn)?;
    let mean = g.value(mean).row(0).to_vec();
    let var = g.value(var).row(0).to_vec();
    if mean.iter().chain(&var).any(|v| !v.is_finite()) {
        return Err(TsnetError::Numeric {
            node: g.len() - 1,
            op: "dtb",
            phase: "forward",
        });
    }
    GaussianDiag::new(mean, var)
}

/// First-order noise propagation through a scalar function, checked by
/// simulation.
///
/// Returns `(analytic, empirical)` where `analytic = f'(x0)² si + so` and
/// `empirical` is the sample variance of `f(x0 + εi) + εo` with
/// `εi ~ N(0, si)`, `εo ~ N(0, so)`. `f'` is taken by a five-point stencil.
pub fn taylor_variance_mc_check<F, R>(
    f: F,
    x0: f64,
    si: f64,
    so: f64,
    n_samples: usize,
    rng: &mut R,
) -> (f64, f64)
where
    F: Fn(f64) -> f64,
    R: Rng + ?Sized,
{
    let h = 1e-3 * x0.abs().max(1.0);
    let d = (-f(x0 + 2.0 * h) + 8.0 * f(x0 + h) - 8.0 * f(x0 - h) + f(x0 - 2.0 * h)) / (12.0 * h);
    let analytic = d * d * si + so;

    let (sd_i, sd_o) = (si.sqrt(), so.sqrt());
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for k in 0..n_samples {
        let ei: f64 = rng.sample(StandardNormal);
        let eo: f64 = StandardNormal.sample(rng);
        let y = f(x0 + sd_i * ei) + sd_o * eo;
        let delta = y - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (y - mean);
    }
    let empirical = if n_samples > 1 {
        m2 / (n_samples - 1) as f64
    } else {
        0.0
    };
    (analytic, empirical)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, ParamStore};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_mean(w: &[f64]) -> Mlp {
        // 2 -> 2 (identity hidden) -> 1, product = w
        let spec = MlpSpec::linear(vec![w.len(), 1, 1]).unwrap();
        let mut p = spec.init(&mut ChaCha8Rng::seed_from_u64(0));
        p.tensors_mut()[0] = Array2::from_shape_vec((w.len(), 1), w.to_vec()).unwrap();
        p.tensors_mut()[1] = array![[0.0]];
        p.tensors_mut()[2] = array![[1.0]];
        p.tensors_mut()[3] = array![[0.0]];
        Mlp { spec, params: p }
    }

    /// Head whose output layer is zero with bias = ln(target - floor), so the
    /// head emits exactly the requested variance.
    fn constant_var_head(m: usize, out: usize, targets: &[f64]) -> Mlp {
        let spec = MlpSpec::new(vec![m, 2, out]).unwrap();
        let mut p = spec.init(&mut ChaCha8Rng::seed_from_u64(1));
        p.tensors_mut()[2] = Array2::zeros((2, out));
        p.tensors_mut()[3] =
            Array2::from_shape_fn((1, out), |(_, k)| (targets[k] - VAR_FLOOR).ln());
        Mlp { spec, params: p }
    }

    #[test]
    fn variance_head_values() {
        assert_eq!(variance_head(&[0.0]).unwrap(), vec![1.0 + 1e-6]);
        let v = variance_head(&[-40.0]).unwrap()[0];
        assert!((v - ((-12.0f64).exp() + 1e-6)).abs() < 1e-18);
        assert!((v - 7.144e-6).abs() < 1e-9);
        assert!(variance_head(&[f64::NAN]).is_err());
        let xs: Vec<f64> = (-300..300).map(|i| i as f64 * 0.1).collect();
        let vs = variance_head(&xs).unwrap();
        assert!(vs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn linear_mean_hand_case() {
        // w = [1, 2], s = [0.25, 0.01], σo = 0.04 -> 0.25 + 0.04 + 0.04 = 0.33
        let dtb = DtbParams::new(
            linear_mean(&[1.0, 2.0]),
            constant_var_head(2, 2, &[0.25, 0.01]),
            constant_var_head(2, 1, &[0.04]),
        )
        .unwrap();
        let out = dtb_forward(&dtb, &[0.3, -0.8]).unwrap();
        assert!((out.mean[0] - (0.3 - 1.6)).abs() < 1e-15);
        assert!((out.var[0] - 0.33).abs() < 1e-12, "{}", out.var[0]);
    }

    #[test]
    fn zero_jacobian_decouples_to_output_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut dtb = DtbParams::init(3, 2, &[4, 4], &[3], &mut rng).unwrap();
        let last = dtb.mu.params.tensors().len() - 2;
        dtb.mu.params.tensors_mut()[last].fill(0.0);
        let x = [0.2, -1.0, 0.7];
        let out = dtb_forward(&dtb, &x).unwrap();
        let raw = crate::autodiff::mlp_forward(&dtb.sigma_out.spec, &dtb.sigma_out.params, &x)
            .unwrap();
        assert_eq!(out.var, variance_head(&raw).unwrap());
    }

    #[test]
    fn floors_propagate_through_jacobian() {
        // heads pinned at the smallest variance the head can emit
        let v_min = (-RAW_CLAMP).exp() + VAR_FLOOR;
        let dtb = DtbParams::new(
            linear_mean(&[1.5, -0.5]),
            constant_var_head(2, 2, &[v_min, v_min]),
            constant_var_head(2, 1, &[v_min]),
        )
        .unwrap();
        let v = dtb_forward(&dtb, &[0.0, 0.0]).unwrap().var[0];
        let expect = v_min * (1.0 + 1.5f64.powi(2) + 0.25);
        assert!((v - expect).abs() < 1e-15, "{v} vs {expect}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = Mlp::init(MlpSpec::new(vec![2, 3, 1]).unwrap(), &mut rng);
        let si = Mlp::init(MlpSpec::new(vec![2, 3, 1]).unwrap(), &mut rng);
        let so = Mlp::init(MlpSpec::new(vec![2, 3, 1]).unwrap(), &mut rng);
        assert!(DtbParams::new(mu, si, so).is_err());
    }

    #[test]
    fn gradient_through_mean_and_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dtb = DtbParams::init(2, 1, &[3], &[3], &mut rng).unwrap();
        let stores: Vec<&ParamStore> = dtb.stores().to_vec();
        let x0 = array![[0.3, -0.4], [1.1, 0.2]];
        let err = finite_difference_check(
            |g: &mut Graph, ids: &[Vec<NodeId>]| {
                let x = g.constant(x0.clone());
                let (mean, var) = dtb_graph(g, &dtb, ids, x)?;
                let lv = g.ln(var);
                let m2 = g.square(mean);
                let q = g.div(m2, var)?;
                let t = g.add(lv, q)?;
                Ok(g.sum_all(t))
            },
            &stores,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn monte_carlo_degenerate_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, e) = taylor_variance_mc_check(|x| x, 0.0, 0.0, 0.0, 1000, &mut rng);
        assert_eq!((a, e), (0.0, 0.0));
        let (a, e) = taylor_variance_mc_check(|x| x, 0.0, 0.01, 0.04, 1_000_000, &mut rng);
        assert!((a - 0.05).abs() < 1e-12);
        assert!((e - a).abs() / a < 0.02, "{e}");
    }
}
