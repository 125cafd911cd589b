use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::error::{Result, TsnetError};

/// Gradient of a scalar loss with respect to one [`ParamStore`], in its flat
/// ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub grads: Vec<f64>,
    /// Max relative error against central differences, when checked.
    pub max_rel_error: Option<f64>,
}

/// Builds a scalar loss on `graph` from the bound parameter nodes, one node
/// list per store in the order the stores were passed.
pub trait LossBuilder: Fn(&mut Graph, &[Vec<NodeId>]) -> Result<NodeId> {}
impl<F> LossBuilder for F where F: Fn(&mut Graph, &[Vec<NodeId>]) -> Result<NodeId> {}

fn eval_loss<F: LossBuilder>(builder: &F, stores: &[&ParamStore]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<Vec<NodeId>> = stores.iter().map(|s| s.bind_const(&mut g)).collect();
    let loss = builder(&mut g, &ids)?;
    if g.shape(loss) != (1, 1) {
        return Err(TsnetError::Contract(format!(
            "loss must be scalar, got shape {:?}",
            g.shape(loss)
        )));
    }
    Ok(g.scalar(loss))
}

/// Exact reverse-mode gradients of the loss with respect to every store.
pub fn grad<F: LossBuilder>(builder: F, stores: &[&ParamStore]) -> Result<Vec<GradReport>> {
    let mut g = Graph::new();
    let ids: Vec<Vec<NodeId>> = stores.iter().map(|s| s.bind(&mut g)).collect();
    let loss = builder(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    Ok(ids
        .iter()
        .map(|store_ids| GradReport {
            grads: grads.flatten(&g, store_ids),
            max_rel_error: None,
        })
        .collect())
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Gradients with each report's `max_rel_error` filled from a five-point
/// central difference sweep over every parameter with step `h`.
pub fn checked_grad<F: LossBuilder>(
    builder: F,
    stores: &[&ParamStore],
    h: f64,
) -> Result<Vec<GradReport>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(TsnetError::Contract(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut reports = grad(&builder, stores)?;
    let mut work: Vec<ParamStore> = stores.iter().map(|s| (*s).clone()).collect();
    for (si, report) in reports.iter_mut().enumerate() {
        let base = work[si].flat();
        let mut flat = base.clone();
        let mut worst = 0.0f64;
        for (pi, &analytic) in report.grads.iter().enumerate() {
            let mut at = |offset: f64| -> Result<f64> {
                flat[pi] = base[pi] + offset;
                work[si].set_flat(&flat)?;
                eval_loss(&builder, &work.iter().collect::<Vec<_>>())
            };
            let numeric = (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h);
            flat[pi] = base[pi];
            worst = worst.max(relative_error(analytic, numeric));
        }
        work[si].set_flat(&base)?;
        report.max_rel_error = Some(worst);
    }
    Ok(reports)
}

/// Max relative error of [`grad`] against central differences over all
/// parameters of all stores.
pub fn finite_difference_check<F: LossBuilder>(
    builder: F,
    stores: &[&ParamStore],
    h: f64,
) -> Result<f64> {
    Ok(checked_grad(builder, stores, h)?
        .iter()
        .filter_map(|r| r.max_rel_error)
        .fold(0.0, f64::max))
}
