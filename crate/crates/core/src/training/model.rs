use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, Variant};
use crate::autodiff::{mlp_graph, Graph, Mlp, MlpSpec, NodeId, ParamStore};
use crate::data::{embedded_width, positional_embed, TransformLog};
use crate::dpm::{density_scores, density_scores_graph, DensityCalibration, DensityNetParams};
use crate::dtb::{dtb_graph, variance_head_graph, DtbParams, GaussianDiag};
use crate::error::{Result, TsnetError};
use crate::uco::{uco_combine_graph, LossWeights, PriorSpec};

/// Rows per graph when predicting in bulk.
const PREDICT_CHUNK: usize = 256;

/// The network producing `(mean, var)` before prior blending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Head {
    Dtb(DtbParams),
    /// Independent mean and raw log-variance networks.
    TwinMlp { mean: Mlp, log_var: Mlp },
}

impl Head {
    pub fn stores(&self) -> Vec<&ParamStore> {
        match self {
            Head::Dtb(d) => d.stores().to_vec(),
            Head::TwinMlp { mean, log_var } => vec![&mean.params, &log_var.params],
        }
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        match self {
            Head::Dtb(d) => d.stores_mut().into_iter().collect(),
            Head::TwinMlp { mean, log_var } => vec![&mut mean.params, &mut log_var.params],
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Head::Dtb(d) => d.input_dim(),
            Head::TwinMlp { mean, .. } => mean.spec.input_dim(),
        }
    }

    /// `(mean, var)` for a `B x m` input; `ids` are the bound [`Head::stores`].
    pub fn graph(&self, g: &mut Graph, ids: &[Vec<NodeId>], x: NodeId) -> Result<(NodeId, NodeId)> {
        match self {
            Head::Dtb(d) => dtb_graph(g, d, ids, x),
            Head::TwinMlp { mean, log_var } => {
                let mu = mlp_graph(g, &mean.spec, &ids[0], x)?;
                let raw = mlp_graph(g, &log_var.spec, &ids[1], x)?;
                Ok((mu, variance_head_graph(g, raw)))
            }
        }
    }
}

/// A trained (or freshly initialized) model with everything needed to map
/// raw inputs to predictive Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsnetModel {
    pub variant: Variant,
    pub head: Head,
    pub density: Option<DensityNetParams>,
    pub calibration: Option<DensityCalibration>,
    /// Prior in standardized target units.
    pub prior: PriorSpec,
    pub embed_levels: Option<usize>,
    pub weights: LossWeights,
    pub transform_log: TransformLog,
}

/// Initializes the networks a variant needs. `n_features` and `n_targets`
/// are raw (pre-embedding) widths.
pub fn build_variant<R: Rng + ?Sized>(
    cfg: &TrainConfig,
    n_features: usize,
    n_targets: usize,
    prior: PriorSpec,
    transform_log: TransformLog,
    rng: &mut R,
) -> Result<TsnetModel> {
    cfg.validate()?;
    if n_features == 0 || n_targets == 0 {
        return Err(TsnetError::Config("model needs at least one feature and one target".into()));
    }
    let m = cfg
        .embed_levels
        .map_or(n_features, |l| embedded_width(n_features, l));
    let head = if cfg.variant.uses_dtb() {
        Head::Dtb(DtbParams::init(m, n_targets, &cfg.mu_hidden, &cfg.sigma_hidden, rng)?)
    } else {
        Head::TwinMlp {
            mean: Mlp::init(MlpSpec::with_hidden(m, &cfg.mu_hidden, n_targets)?, rng),
            log_var: Mlp::init(MlpSpec::with_hidden(m, &cfg.sigma_hidden, n_targets)?, rng),
        }
    };
    let density = if cfg.variant.uses_dpn() {
        Some(DensityNetParams::init(n_features, cfg.dpm.embed_dim, cfg.dpm.hidden, rng)?)
    } else {
        None
    };
    Ok(TsnetModel {
        variant: cfg.variant,
        head,
        density,
        calibration: None,
        prior,
        embed_levels: cfg.embed_levels,
        weights: cfg.loss,
        transform_log,
    })
}

/// Model-space predictions for a set of points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub mean: Array2<f64>,
    pub var: Array2<f64>,
    /// Density weight per point (1 for models without the density module).
    pub k_d: Vec<f64>,
}

impl Predictions {
    pub fn to_gaussians(&self) -> Result<Vec<GaussianDiag>> {
        self.mean
            .rows()
            .into_iter()
            .zip(self.var.rows())
            .map(|(m, v)| GaussianDiag::new(m.to_vec(), v.to_vec()))
            .collect()
    }
}

impl TsnetModel {
    /// Head input for standardized features.
    pub fn head_input(&self, x_std: &Array2<f64>) -> Array2<f64> {
        match self.embed_levels {
            Some(l) => positional_embed(x_std, l),
            None => x_std.clone(),
        }
    }

    /// All parameter stores, head first then density net.
    pub fn stores(&self) -> Vec<&ParamStore> {
        let mut v = self.head.stores();
        if let Some(d) = &self.density {
            v.push(&d.params);
        }
        v
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut v = self.head.stores_mut();
        if let Some(d) = &mut self.density {
            v.push(&mut d.params);
        }
        v
    }

    pub fn all_finite(&self) -> bool {
        self.stores().iter().all(|s| s.all_finite())
    }

    /// Raw density scores over standardized features.
    pub fn density_scores(&self, x_std: &Array2<f64>) -> Result<Option<Vec<f64>>> {
        self.density.as_ref().map(|d| density_scores(d, x_std)).transpose()
    }

    /// Predictions for standardized features, in standardized target units.
    pub fn predict_standardized(&self, x_std: &Array2<f64>) -> Result<Predictions> {
        let cal = match (&self.density, &self.calibration) {
            (Some(_), None) => {
                return Err(TsnetError::Contract(
                    "model has a density module but no calibration".into(),
                ))
            }
            (_, c) => c,
        };
        let n = x_std.nrows();
        let l = self.prior.dim();
        let mut mean = Array2::zeros((n, l));
        let mut var = Array2::zeros((n, l));
        let mut k_d = Vec::with_capacity(n);
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(n);
            let xs = x_std.slice(s![start..end, ..]).to_owned();
            let mut g = Graph::new();
            let ids: Vec<Vec<NodeId>> = self.head.stores().iter().map(|s| s.bind_const(&mut g)).collect();
            let xh = g.constant(self.head_input(&xs));
            let (mu, sg) = self.head.graph(&mut g, &ids, xh)?;
            let kd = match (&self.density, cal) {
                (Some(d), Some(cal)) => {
                    let p = d.params.bind_const(&mut g);
                    let xd = g.constant(xs);
                    let sc = density_scores_graph(&mut g, d, &p, xd)?;
                    cal.weight_graph(&mut g, sc)
                }
                _ => g.constant(Array2::ones((end - start, 1))),
            };
            let (mu, sg) = uco_combine_graph(&mut g, kd, mu, sg, &self.prior)?;
            mean.slice_mut(s![start..end, ..]).assign(g.value(mu));
            var.slice_mut(s![start..end, ..]).assign(g.value(sg));
            k_d.extend(g.value(kd).iter().copied());
        }
        if mean.iter().chain(var.iter()).any(|v| !v.is_finite()) {
            return Err(TsnetError::Numeric {
                node: 0,
                op: "predict",
                phase: "forward",
            });
        }
        Ok(Predictions { mean, var, k_d })
    }

    /// Predictions for raw features, mapped back to the pre-standardization
    /// target scale (log space for log-transformed targets).
    pub fn predict(&self, x_raw: &Array2<f64>) -> Result<Predictions> {
        let x_std = self.transform_log.transform_features(x_raw)?;
        let p = self.predict_standardized(&x_std)?;
        Ok(Predictions {
            mean: self.transform_log.destandardize_targets(&p.mean)?,
            var: self.transform_log.destandardize_target_var(&p.var)?,
            k_d: p.k_d,
        })
    }
}

/// Per-point predictive Gaussians for raw features.
pub fn predict(model: &TsnetModel, x_raw: &Array2<f64>) -> Result<Vec<GaussianDiag>> {
    model.predict(x_raw)?.to_gaussians()
}
