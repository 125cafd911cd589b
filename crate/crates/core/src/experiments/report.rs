use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind};
use crate::error::TsnetError;
use crate::training::{Metrics, Variant};

pub const REPORT_FORMAT: &str = "tsnet-report/1";

/// Evaluation region of a toy grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    /// Inside the training support.
    In,
    /// Outside it.
    Ext,
    All,
}

/// Selection rule of an active-learning arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Uncertainty,
    Random,
}

/// One evaluation of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub seed: u64,
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<Arm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle: Option<usize>,
    /// Training rows used (labeled-set size in active learning).
    pub n_train: usize,
    pub n_eval: usize,
    pub metrics: Metrics,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
}

/// Rows that aggregate together: everything but the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowKey {
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<Arm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle: Option<usize>,
}

impl RunRow {
    pub fn key(&self) -> RowKey {
        RowKey {
            variant: self.variant,
            region: self.region,
            noise_rate: self.noise_rate,
            arm: self.arm,
            cycle: self.cycle,
        }
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(flatten)]
    pub key: RowKey,
    pub seeds: Vec<u64>,
    pub mse: MeanStd,
    pub mae: MeanStd,
    pub nll: MeanStd,
}

/// Groups rows by [`RowKey`] in order of first appearance.
pub fn aggregate(rows: &[RunRow]) -> Vec<Aggregate> {
    let mut groups: Vec<(RowKey, Vec<&RunRow>)> = Vec::new();
    for r in rows {
        let k = r.key();
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(r),
            None => groups.push((k, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(key, rs)| {
            let col = |f: fn(&Metrics) -> f64| MeanStd::of(&rs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>()).expect("non-empty group");
            Aggregate {
                key,
                seeds: rs.iter().map(|r| r.seed).collect(),
                mse: col(|m| m.mse),
                mae: col(|m| m.mae),
                nll: col(|m| m.nll),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    /// `MSE_i / MSE_0` over noise rates.
    Rpi,
    /// `(MSE_0 - MSE_i) / MSE_0` over active-learning cycles.
    Pir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexPoint {
    /// Noise rate or cycle number.
    pub at: f64,
    /// Seed-mean MSE the index is computed from.
    pub mse: f64,
    /// `None` when the baseline MSE is zero.
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexSeries {
    pub index: IndexKind,
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<Arm>,
    pub points: Vec<IndexPoint>,
}

impl IndexSeries {
    /// Builds the series from `(at, mse)` pairs; the first pair is the
    /// baseline.
    pub fn from_mse(index: IndexKind, variant: Variant, arm: Option<Arm>, series: &[(f64, f64)]) -> Self {
        let base = series.first().map_or(0.0, |p| p.1);
        let points = series
            .iter()
            .map(|&(at, mse)| IndexPoint {
                at,
                mse,
                value: (base != 0.0).then(|| match index {
                    IndexKind::Rpi => mse / base,
                    IndexKind::Pir => (base - mse) / base,
                }),
            })
            .collect();
        Self {
            index,
            variant,
            arm,
            points,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Config,
    Data,
    Divergence,
    Other,
}

impl FailureKind {
    pub fn of(e: &TsnetError) -> Self {
        match e {
            TsnetError::Config(_) => FailureKind::Config,
            TsnetError::Schema(_) | TsnetError::Parse { .. } | TsnetError::Csv(_) => FailureKind::Data,
            TsnetError::Divergence { .. } => FailureKind::Divergence,
            _ => FailureKind::Other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub kind: FailureKind,
    pub error: String,
}

/// Everything an experiment produced, as written to `metrics.json`.
/// Aggregates cover exactly the seeds that completed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<Aggregate>,
    pub indices: Vec<IndexSeries>,
    pub failed_seeds: Vec<SeedFailure>,
    /// Files written next to this report, by name.
    pub files: Vec<String>,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new(config: &ExperimentConfig) -> Self {
        let mut config = config.clone();
        config.out_dir = None;
        Self {
            format: REPORT_FORMAT.to_string(),
            experiment: config.experiment,
            seeds: config.seeds.clone(),
            config,
            rows: Vec::new(),
            aggregates: Vec::new(),
            indices: Vec::new(),
            failed_seeds: Vec::new(),
            files: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Seeds without a recorded failure.
    pub fn completed_seeds(&self) -> Vec<u64> {
        self.seeds
            .iter()
            .copied()
            .filter(|s| self.failed_seeds.iter().all(|f| f.seed != *s))
            .collect()
    }

    pub fn find_aggregate(&self, pred: impl Fn(&RowKey) -> bool) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| pred(&a.key))
    }
}
