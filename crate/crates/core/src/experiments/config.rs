use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{CsvSchema, NoisePlan};
use crate::error::{Result, TsnetError};
use crate::training::{DpmConfig, TrainConfig, Variant};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Train one variant on the 1D toy and predict the evaluation grid.
    #[default]
    Toy1d,
    Toy2d,
    /// Train/val/test comparison on any data source.
    Compare,
    Antinoise,
    Active,
    Ablate,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Toy1d => "toy1d",
            ExperimentKind::Toy2d => "toy2d",
            ExperimentKind::Compare => "compare",
            ExperimentKind::Antinoise => "antinoise",
            ExperimentKind::Active => "active",
            ExperimentKind::Ablate => "ablate",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    #[default]
    Toy1d,
    Toy2d,
    /// A CSV file and its JSON column schema.
    Csv { path: PathBuf, schema: PathBuf },
}

impl DataSource {
    pub fn is_toy(&self) -> bool {
        !matches!(self, DataSource::Csv { .. })
    }
}

/// Train/val/test fractions for CSV data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn as_tuple(self) -> (f64, f64, f64) {
        (self.train, self.val, self.test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AntinoiseConfig {
    /// Noise family and strengths; its `rate` is replaced by each entry of
    /// `rates`.
    pub noise: NoisePlan,
    pub rates: Vec<f64>,
}

impl Default for AntinoiseConfig {
    fn default() -> Self {
        Self {
            noise: NoisePlan::default(),
            rates: vec![0.0, 0.2, 0.4, 0.8, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActiveConfig {
    /// Fraction of the pool labeled before the first cycle (rounded up).
    pub initial_fraction: f64,
    /// Acquisition rounds after the initial fit.
    pub cycles: usize,
    /// Each round acquires `ceil(acquire_fraction * remaining0)` points,
    /// where `remaining0` is the unlabeled pool size before the first round.
    pub acquire_fraction: f64,
    /// Also run the random-selection arm.
    pub random_control: bool,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self {
            initial_fraction: 0.2,
            cycles: 5,
            acquire_fraction: 0.1,
            random_control: true,
        }
    }
}

/// Which evaluation points count as interpolation. One-feature data uses the
/// training quantile interval `[quantile_lo, quantile_hi]`; wider data uses
/// the training bounding box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub quantile_lo: f64,
    pub quantile_hi: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            quantile_lo: 0.01,
            quantile_hi: 0.99,
        }
    }
}

/// One experiment: protocol, data, model settings and seeds.
///
/// In JSON, the `train` object is merged over a preset that depends on the
/// data source: toy data defaults to positional embedding with
/// [`TOY_EMBED_LEVELS`] levels, the toy learning rate and the toy density
/// settings, tabular data to [`TrainConfig::default`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub data: DataSource,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Where outputs go. Not echoed into reports.
    pub out_dir: Option<PathBuf>,
    pub split: SplitRatios,
    /// Fraction of the toy training sample held out for validation.
    pub toy_val_fraction: f64,
    pub antinoise: AntinoiseConfig,
    pub active: ActiveConfig,
    pub ablation: AblationConfig,
}

pub const TOY_EMBED_LEVELS: usize = 3;
pub const TOY_LR: f64 = 3e-3;
/// Toy samples are small and strongly clustered, so the density target
/// uses wider augmentation and a softer kernel than on tabular data.
pub const TOY_SIGMA_AUG_SCALE: f64 = 0.5;
pub const TOY_KERNEL_WIDTH: f64 = 16.0;
/// The toy validation split is small and noisy, so early stopping is off
/// (patience equals the epoch budget); the best validation epoch is still
/// kept.
pub const TOY_PATIENCE: usize = 2000;

/// Training preset for a data source.
pub fn train_preset(data: &DataSource) -> TrainConfig {
    if data.is_toy() {
        TrainConfig {
            embed_levels: Some(TOY_EMBED_LEVELS),
            lr: TOY_LR,
            patience: TOY_PATIENCE,
            dpm: DpmConfig {
                sigma_aug_scale: TOY_SIGMA_AUG_SCALE,
                kernel_width: TOY_KERNEL_WIDTH,
                ..DpmConfig::default()
            },
            ..TrainConfig::default()
        }
    } else {
        TrainConfig::default()
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else
/// is replaced.
fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Defaults for a protocol on a data source.
    pub fn preset(experiment: ExperimentKind, data: DataSource) -> Self {
        Self {
            experiment,
            train: train_preset(&data),
            data,
            seeds: vec![0, 1, 2],
            out_dir: None,
            split: SplitRatios::default(),
            toy_val_fraction: 0.2,
            antinoise: AntinoiseConfig::default(),
            active: ActiveConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    /// Parses a JSON document; absent keys take the preset for the document's
    /// `experiment` and `data`. Relative CSV paths are resolved against
    /// `base_dir` when given.
    pub fn from_json_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let cfg_err = |e: serde_json::Error| TsnetError::Config(e.to_string());
        let patch: Value = serde_json::from_str(text).map_err(cfg_err)?;
        if !patch.is_object() {
            return Err(TsnetError::Config("config must be a JSON object".into()));
        }
        let experiment: ExperimentKind = match patch.get("experiment") {
            Some(v) => serde_json::from_value(v.clone()).map_err(cfg_err)?,
            None => ExperimentKind::default(),
        };
        let data: DataSource = match patch.get("data") {
            Some(v) => serde_json::from_value(v.clone()).map_err(cfg_err)?,
            None => default_data(experiment),
        };
        let mut base = serde_json::to_value(Self::preset(experiment, data)).map_err(cfg_err)?;
        merge_json(&mut base, patch);
        let mut cfg: Self = serde_json::from_value(base).map_err(cfg_err)?;
        if let (Some(dir), DataSource::Csv { path, schema }) = (base_dir, &mut cfg.data) {
            for p in [path, schema] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TsnetError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TsnetError::Config(msg));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        self.train.validate()?;
        match (&self.data, self.experiment) {
            (DataSource::Csv { .. }, ExperimentKind::Toy1d | ExperimentKind::Toy2d | ExperimentKind::Ablate) => {
                return bad(format!("experiment '{}' needs toy data", self.experiment.name()));
            }
            (DataSource::Csv { path, schema }, _) => {
                for p in [path, schema] {
                    if !p.is_file() {
                        return bad(format!("file not found: {}", p.display()));
                    }
                }
            }
            (DataSource::Toy1d, ExperimentKind::Toy2d) | (DataSource::Toy2d, ExperimentKind::Toy1d) => {
                return bad(format!("experiment '{}' does not match the data source", self.experiment.name()));
            }
            _ => {}
        }
        let s = self.split;
        if [s.train, s.val, s.test].iter().any(|r| !(0.0..=1.0).contains(r))
            || (s.train + s.val + s.test - 1.0).abs() > 1e-9
            || s.train == 0.0
        {
            return bad("split fractions must be in [0, 1], sum to 1 and leave training rows".into());
        }
        if !(0.0..1.0).contains(&self.toy_val_fraction) {
            return bad("toy_val_fraction must be in [0, 1)".into());
        }
        if self.antinoise.rates.is_empty() || self.antinoise.rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("antinoise.rates must be non-empty and within [0, 1]".into());
        }
        if self.antinoise.rates[0] != 0.0 {
            return bad("antinoise.rates must start at 0 (the RPI baseline)".into());
        }
        self.antinoise.noise.validate()?;
        let a = &self.active;
        if !(a.initial_fraction > 0.0 && a.initial_fraction < 1.0) || !(a.acquire_fraction > 0.0 && a.acquire_fraction <= 1.0) {
            return bad("active fractions must be in (0, 1)".into());
        }
        let ab = &self.ablation;
        if ab.variants.is_empty() {
            return bad("ablation.variants must not be empty".into());
        }
        if !(0.0 <= ab.quantile_lo && ab.quantile_lo < ab.quantile_hi && ab.quantile_hi <= 1.0) {
            return bad("ablation quantiles must satisfy 0 <= lo < hi <= 1".into());
        }
        Ok(())
    }

    /// Loads the CSV schema of a CSV data source.
    pub fn csv_schema(&self) -> Result<Option<CsvSchema>> {
        match &self.data {
            DataSource::Csv { schema, .. } => CsvSchema::from_json_file(schema).map(Some),
            _ => Ok(None),
        }
    }
}

fn default_data(experiment: ExperimentKind) -> DataSource {
    match experiment {
        ExperimentKind::Toy2d => DataSource::Toy2d,
        _ => DataSource::Toy1d,
    }
}
