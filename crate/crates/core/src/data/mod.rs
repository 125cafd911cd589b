//! Datasets: toy generators, CSV ingestion, splitting, standardization,
//! positional embedding and noise injection.

mod embed;
mod noise;
mod tabular;
mod toy;

pub use embed::{embedded_width, positional_embed};
pub use noise::{inject_noise, NoiseKindPlan, NoisePlan};
pub use tabular::{load_csv, load_feature_csv, CsvSchema, TargetSpec};
pub use toy::{
    gen_toy1d, gen_toy2d, repair_covariance, toy1d_f, toy1d_noise_sd, toy2d_f, toy2d_noise_sd,
    ToyKind, ToyProblem,
};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TsnetError};

/// Floor applied to column standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// How one column was transformed: optional `log1p`, then `(v - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub name: String,
    pub log1p: bool,
    pub mean: f64,
    pub std: f64,
}

impl ColumnTransform {
    pub fn identity(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            log1p: false,
            mean: 0.0,
            std: 1.0,
        }
    }

    pub fn forward(&self, v: f64) -> f64 {
        let v = if self.log1p { v.ln_1p() } else { v };
        (v - self.mean) / self.std
    }

    /// Undoes the standardization only (stays in log space).
    pub fn destandardize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    pub fn inverse(&self, v: f64) -> f64 {
        let v = self.destandardize(v);
        if self.log1p {
            v.exp_m1()
        } else {
            v
        }
    }
}

/// Every transform applied to a dataset, enough to map raw inputs in and
/// predictions out.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformLog {
    pub features: Vec<ColumnTransform>,
    pub targets: Vec<ColumnTransform>,
    /// Rows dropped at ingestion because of empty or missing cells.
    pub rejected_rows: usize,
}

fn map_columns(a: &Array2<f64>, cols: &[ColumnTransform], f: fn(&ColumnTransform, f64) -> f64) -> Result<Array2<f64>> {
    if a.ncols() != cols.len() {
        return Err(TsnetError::shape(
            "transform",
            format!("{} columns, log has {}", a.ncols(), cols.len()),
        ));
    }
    Ok(Array2::from_shape_fn(a.dim(), |(i, j)| f(&cols[j], a[[i, j]])))
}

impl TransformLog {
    pub fn identity(features: &[String], targets: &[String]) -> Self {
        Self {
            features: features.iter().map(ColumnTransform::identity).collect(),
            targets: targets.iter().map(ColumnTransform::identity).collect(),
            rejected_rows: 0,
        }
    }

    /// Raw features to model space.
    pub fn transform_features(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        map_columns(x, &self.features, ColumnTransform::forward)
    }

    /// Model-space features back to raw units.
    pub fn inverse_features(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        map_columns(x, &self.features, ColumnTransform::inverse)
    }

    pub fn transform_targets(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        map_columns(y, &self.targets, ColumnTransform::forward)
    }

    /// Model-space targets back to raw units (including `expm1`).
    pub fn inverse_targets(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        map_columns(y, &self.targets, ColumnTransform::inverse)
    }

    /// Model-space targets to the pre-standardization scale (log space for
    /// logged targets). Metrics are reported on this scale.
    pub fn destandardize_targets(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        map_columns(y, &self.targets, ColumnTransform::destandardize)
    }

    /// Model-space target variances to the pre-standardization scale.
    pub fn destandardize_target_var(&self, var: &Array2<f64>) -> Result<Array2<f64>> {
        map_columns(var, &self.targets, |c, v| v * c.std * c.std)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Features, targets and their bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
    pub transform_log: TransformLog,
    pub split: Option<SplitIndices>,
}

impl Dataset {
    pub fn new(
        x: Array2<f64>,
        y: Array2<f64>,
        feature_names: Vec<String>,
        target_names: Vec<String>,
    ) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(TsnetError::shape(
                "Dataset",
                format!("{} feature rows, {} target rows", x.nrows(), y.nrows()),
            ));
        }
        if feature_names.len() != x.ncols() || target_names.len() != y.ncols() {
            return Err(TsnetError::shape("Dataset", "column names do not match widths"));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(TsnetError::Contract("dataset contains non-finite values".into()));
        }
        let transform_log = TransformLog::identity(&feature_names, &target_names);
        Ok(Self {
            x,
            y,
            feature_names,
            target_names,
            transform_log,
            split: None,
        })
    }

    /// Unnamed columns `x0..`, `y0..`.
    pub fn from_arrays(x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        let f = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        let t = (0..y.ncols()).map(|j| format!("y{j}")).collect();
        Self::new(x, y, f, t)
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_targets(&self) -> usize {
        self.y.ncols()
    }

    pub fn split_indices(&self) -> Result<&SplitIndices> {
        self.split
            .as_ref()
            .ok_or_else(|| TsnetError::Contract("dataset has no split".into()))
    }

    /// Features and targets of the given rows.
    pub fn rows(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (self.x.select(Axis(0), idx), self.y.select(Axis(0), idx))
    }

    pub fn train(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok(self.rows(&self.split_indices()?.train))
    }

    pub fn val(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok(self.rows(&self.split_indices()?.val))
    }

    pub fn test(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok(self.rows(&self.split_indices()?.test))
    }

    /// Seeded shuffle into train/val/test. Validation and test sizes are
    /// `floor(n * ratio)`; the remainder goes to train.
    pub fn split(mut self, ratios: (f64, f64, f64), seed: u64) -> Result<Self> {
        let (a, b, c) = ratios;
        if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(TsnetError::Contract(format!(
                "split ratios must be in [0, 1] and sum to 1, got ({a}, {b}, {c})"
            )));
        }
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (n as f64 * b).floor() as usize;
        let n_test = (n as f64 * c).floor() as usize;
        let n_train = n - n_val - n_test;
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        self.split = Some(SplitIndices {
            train: idx,
            val,
            test,
        });
        Ok(self)
    }

    /// Standardizes every column on training-split statistics (population
    /// std, floored) and records the parameters in the transform log. Any
    /// `log1p` already recorded is kept.
    pub fn standardize(mut self) -> Result<Self> {
        let train = self.split_indices()?.train.clone();
        if train.is_empty() {
            return Err(TsnetError::Contract("cannot standardize on an empty training split".into()));
        }
        fn apply(a: &mut Array2<f64>, cols: &mut [ColumnTransform], train: &[usize]) {
            let sub = a.select(Axis(0), train);
            let mean = sub.mean_axis(Axis(0)).expect("non-empty");
            let std = sub.std_axis(Axis(0), 0.0);
            for (j, col) in cols.iter_mut().enumerate() {
                let s = std[j].max(STD_FLOOR);
                a.column_mut(j).mapv_inplace(|v| (v - mean[j]) / s);
                // compose with any earlier standardization
                col.mean += mean[j] * col.std;
                col.std *= s;
            }
        }
        apply(&mut self.x, &mut self.transform_log.features, &train);
        apply(&mut self.y, &mut self.transform_log.targets, &train);
        Ok(self)
    }
}
