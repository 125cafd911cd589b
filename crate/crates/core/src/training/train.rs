use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::{metrics, Metrics};
use super::model::{build_variant, TsnetModel};
use super::optim::{clip_global_norm, Adam};
use crate::autodiff::{Graph, Mat, NodeId};
use crate::data::Dataset;
use crate::dpm::{
    augment_features, density_scores_graph, kl_loss_graph, knn_logits, softmax, DensityCalibration,
    DensityKernel,
};
use crate::error::{Result, TsnetError};
use crate::ncl::{add_noise_matrix, ncl_loss_graph, sample_sigma_k, NclConfig};
use crate::uco::{hmse_loss_graph, reparam_sample_graph, total_loss_graph, uco_combine_graph, PriorSpec};

/// Independent random streams derived from one seed.
#[derive(Clone, Copy)]
pub(crate) enum Stream {
    Init = 0,
    Shuffle = 1,
    Noise = 2,
    Augment = 3,
    /// Noise injection by the experiment protocols.
    Inject = 4,
    /// Pool selection in active learning.
    Acquire = 5,
}

pub(crate) fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Everything random about one optimization step, drawn up front so the
/// loss is a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    /// Standardized features, `B x m`.
    pub x: Array2<f64>,
    /// Standardized targets, `B x l`.
    pub y: Array2<f64>,
    /// Re-noised copy of `x` for the contrastive branch.
    pub x_noised: Option<Array2<f64>>,
    /// Density-target points (whose first `B` rows are `x`) and their
    /// target probabilities.
    pub density_targets: Option<(Array2<f64>, Vec<f64>)>,
    /// Standard-normal draws for the reparameterized sample, `B x l`.
    pub eps: Array2<f64>,
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub cl: Option<NodeId>,
    pub kl: Option<NodeId>,
    pub hmse: NodeId,
}

/// Builds the full training loss for one batch. `ids` are the bound
/// [`TsnetModel::stores`].
pub fn batch_loss_graph(
    g: &mut Graph,
    model: &TsnetModel,
    ncl: &NclConfig,
    detach_kd: bool,
    ids: &[Vec<NodeId>],
    batch: &BatchInputs,
) -> Result<LossNodes> {
    let n_head = model.head.stores().len();
    let (head_ids, density_ids) = ids.split_at(n_head);
    let b = batch.x.nrows();

    let xh = g.constant(model.head_input(&batch.x));
    let (mu_n, var_n) = model.head.graph(g, head_ids, xh)?;

    let cl = match &batch.x_noised {
        Some(xn) => {
            let xh = g.constant(model.head_input(xn));
            let noised = model.head.graph(g, head_ids, xh)?;
            Some(ncl_loss_graph(g, (mu_n, var_n), noised, ncl)?)
        }
        None => None,
    };

    let (kd, kl) = match (&model.density, &batch.density_targets) {
        (Some(dnp), Some((pts, rho))) => {
            let cal = model
                .calibration
                .ok_or_else(|| TsnetError::Contract("density weight needs a calibration".into()))?;
            let xd = g.constant(pts.clone());
            let scores = density_scores_graph(g, dnp, &density_ids[0], xd)?;
            let kl = kl_loss_graph(g, scores, rho)?;
            let own = g.select_rows(scores, 0, b)?;
            let own = if detach_kd { g.detach(own) } else { own };
            (cal.weight_graph(g, own), Some(kl))
        }
        (None, None) => (g.constant(Array2::ones((b, 1))), None),
        _ => {
            return Err(TsnetError::Contract(
                "density targets must be supplied exactly when the model has a density module".into(),
            ))
        }
    };

    let (mu, var) = uco_combine_graph(g, kd, mu_n, var_n, &model.prior)?;
    let y_tilde = reparam_sample_graph(g, mu, var, batch.eps.clone())?;
    let y = g.constant(batch.y.clone());
    let hmse = hmse_loss_graph(g, y, y_tilde, var, model.weights.lambda_h)?;
    let total = total_loss_graph(g, cl, kl, hmse, &model.weights)?;
    Ok(LossNodes { total, cl, kl, hmse })
}

/// One epoch's mean loss terms and validation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cl: f64,
    pub loss_kl: f64,
    pub loss_hmse: f64,
    pub val: Metrics,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TsnetModel,
    pub history: TrainHistory,
}

/// Static density targets for the training set.
struct DensityTargets {
    /// `X` stacked over its augmented copy.
    points: Array2<f64>,
    logits: Vec<f64>,
    n: usize,
}

impl DensityTargets {
    fn new(x: &Array2<f64>, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        if x.nrows() <= cfg.dpm.k {
            return Err(TsnetError::Config(format!(
                "density module needs more than k={} training rows, got {}",
                cfg.dpm.k,
                x.nrows()
            )));
        }
        let points = augment_features(x, cfg.dpm.sigma_aug_scale, &mut stream(seed, Stream::Augment))?;
        let kernel = DensityKernel::adaptive(x, cfg.dpm.k, cfg.dpm.contrast, cfg.dpm.kernel_width)?;
        let logits = knn_logits(&points, x, cfg.dpm.k, kernel, true)?;
        Ok(Self {
            points,
            logits,
            n: x.nrows(),
        })
    }

    /// Batch rows and their augmented copies, with renormalized targets.
    fn for_batch(&self, idx: &[usize]) -> (Array2<f64>, Vec<f64>) {
        let rows: Vec<usize> = idx.iter().copied().chain(idx.iter().map(|i| i + self.n)).collect();
        let logits: Vec<f64> = rows.iter().map(|&r| self.logits[r]).collect();
        (self.points.select(Axis(0), &rows), softmax(&logits))
    }
}

fn calibrate(model: &mut TsnetModel, x_train: &Array2<f64>) -> Result<()> {
    if let Some(scores) = model.density_scores(x_train)? {
        model.calibration = Some(DensityCalibration::from_scores(&scores)?);
    }
    Ok(())
}

fn evaluate(model: &TsnetModel, x: &Array2<f64>, y: &Array2<f64>) -> Result<Metrics> {
    let p = model.predict_standardized(x)?;
    let log = &model.transform_log;
    metrics(
        &log.destandardize_targets(y)?,
        &log.destandardize_targets(&p.mean)?,
        &log.destandardize_target_var(&p.var)?,
    )
}

fn divergence(epoch: usize, batch: usize, detail: String, last_good: &TsnetModel) -> TsnetError {
    TsnetError::Divergence {
        epoch,
        batch,
        detail,
        last_good: Box::new(last_good.clone()),
    }
}

/// Trains a model on the training split of a split, standardized dataset,
/// keeping the parameters with the lowest validation MSE (the training rows
/// stand in when the validation split is empty).
pub fn train(cfg: &TrainConfig, dataset: &Dataset, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = dataset.split_indices()?;
    if split.train.is_empty() {
        return Err(TsnetError::Contract("empty training split".into()));
    }
    let (x_train, y_train) = dataset.train()?;
    let (x_val, y_val) = if split.val.is_empty() {
        (x_train.clone(), y_train.clone())
    } else {
        dataset.val()?
    };

    let mut prior = PriorSpec::from_labels(&y_train, cfg.prior.var_scale)?;
    if let Some(mu) = &cfg.prior.mu {
        prior = PriorSpec::new(mu.clone(), prior.var)?;
    }
    let mut model = build_variant(
        cfg,
        dataset.n_features(),
        dataset.n_targets(),
        prior,
        dataset.transform_log.clone(),
        &mut stream(seed, Stream::Init),
    )?;
    calibrate(&mut model, &x_train)?;
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { model, history });
    }

    let density = if cfg.variant.uses_dpn() {
        Some(DensityTargets::new(&x_train, cfg, seed)?)
    } else {
        None
    };
    let mut shuffle_rng = stream(seed, Stream::Shuffle);
    let mut noise_rng = stream(seed, Stream::Noise);
    let mut opt = Adam::new(&model.stores(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let n_features = dataset.n_features();
    let l = dataset.n_targets();
    let mut best: Option<(f64, TsnetModel)> = None;
    let mut order: Vec<usize> = (0..x_train.nrows()).collect();
    let initial = model.clone();
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = x_train.select(Axis(0), idx);
            let x_noised = if cfg.variant.uses_ncl() {
                let spec = sample_sigma_k(&mut noise_rng, n_features, &cfg.ncl.library)?;
                Some(add_noise_matrix(&x, &spec, &mut noise_rng)?)
            } else {
                None
            };
            let eps = Array2::from_shape_fn((idx.len(), l), |_| noise_rng.sample(StandardNormal));
            let batch = BatchInputs {
                y: y_train.select(Axis(0), idx),
                x,
                x_noised,
                density_targets: density.as_ref().map(|d| d.for_batch(idx)),
                eps,
            };

            let last_good = best.as_ref().map_or(&initial, |(_, m)| m);
            let mut g = Graph::new();
            let ids: Vec<Vec<NodeId>> = model.stores().iter().map(|s| s.bind(&mut g)).collect();
            let nodes = batch_loss_graph(&mut g, &model, &cfg.ncl, cfg.dpm.detach_kd, &ids, &batch)?;
            let total = g.scalar(nodes.total);
            if !total.is_finite() {
                return Err(divergence(epoch, bi, format!("loss is {total}"), last_good));
            }
            let grads = match g.backward(nodes.total) {
                Ok(gr) => gr,
                Err(e @ TsnetError::Numeric { .. }) => {
                    return Err(divergence(epoch, bi, e.to_string(), last_good))
                }
                Err(e) => return Err(e),
            };
            let mut flat: Vec<Vec<Mat>> = ids
                .iter()
                .map(|store| store.iter().map(|&id| grads.get_or_zeros(&g, id)).collect())
                .collect();
            let norm = clip_global_norm(&mut flat, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(divergence(epoch, bi, format!("gradient norm is {norm}"), last_good));
            }
            opt.step(&mut model.stores_mut(), &flat)?;
            if !model.all_finite() {
                return Err(divergence(epoch, bi, "non-finite parameters".into(), last_good));
            }

            sums[0] += total;
            sums[1] += nodes.cl.map_or(0.0, |n| g.scalar(n));
            sums[2] += nodes.kl.map_or(0.0, |n| g.scalar(n));
            sums[3] += g.scalar(nodes.hmse);
            batches += 1;
        }

        calibrate(&mut model, &x_train)?;
        let val = evaluate(&model, &x_val, &y_val)?;
        let b = batches as f64;
        history.records.push(EpochRecord {
            epoch,
            loss_total: sums[0] / b,
            loss_cl: sums[1] / b,
            loss_kl: sums[2] / b,
            loss_hmse: sums[3] / b,
            val,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(m, _)| val.mse < *m) {
            best = Some((val.mse, model.clone()));
            history.best_epoch = Some(epoch);
        }
        if epoch - history.best_epoch.unwrap_or(0) >= cfg.patience {
            history.stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }

    let model = best.map_or(model, |(_, m)| m);
    Ok(TrainOutcome { model, history })
}
