use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TsnetError};
use crate::ncl::NclConfig;
use crate::uco::LossWeights;

/// Which building blocks a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Mlp,
    MlpNcl,
    MlpDpn,
    MlpNclDpn,
    Dtb,
    DtbNcl,
    DtbDpn,
    /// DTB with contrastive learning and density weighting.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Mlp,
        Variant::MlpNcl,
        Variant::MlpDpn,
        Variant::MlpNclDpn,
        Variant::Dtb,
        Variant::DtbNcl,
        Variant::DtbDpn,
        Variant::Full,
    ];

    pub fn uses_dtb(self) -> bool {
        matches!(self, Variant::Dtb | Variant::DtbNcl | Variant::DtbDpn | Variant::Full)
    }

    pub fn uses_ncl(self) -> bool {
        matches!(self, Variant::MlpNcl | Variant::MlpNclDpn | Variant::DtbNcl | Variant::Full)
    }

    pub fn uses_dpn(self) -> bool {
        matches!(self, Variant::MlpDpn | Variant::MlpNclDpn | Variant::DtbDpn | Variant::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mlp => "mlp",
            Variant::MlpNcl => "mlp+ncl",
            Variant::MlpDpn => "mlp+dpn",
            Variant::MlpNclDpn => "mlp+ncl+dpn",
            Variant::Dtb => "dtb",
            Variant::DtbNcl => "dtb+ncl",
            Variant::DtbDpn => "dtb+dpn",
            Variant::Full => "tsnet-full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = TsnetError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "dtb+ncl+dpn" {
            return Ok(Variant::Full);
        }
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| TsnetError::Config(format!("unknown model variant '{s}'")))
    }
}

impl TryFrom<String> for Variant {
    type Error = TsnetError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().to_string()
    }
}

/// Density-module settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpmConfig {
    /// Neighbors in the KNN density target.
    pub k: usize,
    pub sigma_aug_scale: f64,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Logit range of the KNN target; larger values sharpen the contrast
    /// between dense and sparse points.
    pub contrast: f64,
    /// Kernel softening as a multiple of the median squared `k`-th
    /// neighbor distance; larger values flatten the target over dense
    /// regions.
    pub kernel_width: f64,
    /// Stop the prediction loss from training the density scorer through
    /// the density weight.
    pub detach_kd: bool,
}

impl Default for DpmConfig {
    fn default() -> Self {
        Self {
            k: 5,
            sigma_aug_scale: 0.1,
            embed_dim: 16,
            hidden: 16,
            contrast: 4.0,
            kernel_width: 1.0,
            detach_kd: true,
        }
    }
}

/// Prior mean (per output, in standardized units, or label mean when
/// absent) and the multiple of label variance used as prior variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// `"auto"` (or absent) for the label mean, otherwise one value per output.
    #[serde(with = "prior_mean")]
    pub mu: Option<Vec<f64>>,
    pub var_scale: f64,
}

mod prior_mean {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Keyword(String),
        Values(Vec<f64>),
    }

    pub fn serialize<S: Serializer>(mu: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match mu {
            None => "auto".serialize(s),
            Some(v) => v.serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Keyword(k)) if k == "auto" => Ok(None),
            Some(Repr::Keyword(k)) => Err(serde::de::Error::custom(format!(
                "prior.mu must be \"auto\" or a list of numbers, got \"{k}\""
            ))),
            Some(Repr::Values(v)) => Ok(Some(v)),
        }
    }
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            mu: None,
            var_scale: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap.
    pub clip_norm: f64,
    /// Positional-embedding levels for the prediction head; `None` feeds the
    /// standardized features directly.
    pub embed_levels: Option<usize>,
    pub mu_hidden: Vec<usize>,
    pub sigma_hidden: Vec<usize>,
    pub ncl: NclConfig,
    pub dpm: DpmConfig,
    pub loss: LossWeights,
    pub prior: PriorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            epochs: 2000,
            patience: 200,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 10.0,
            embed_levels: None,
            mu_hidden: vec![64, 64, 64],
            sigma_hidden: vec![32, 32],
            ncl: NclConfig::default(),
            dpm: DpmConfig::default(),
            loss: LossWeights::default(),
            prior: PriorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TsnetError::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("adam betas must be in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.mu_hidden.is_empty() || self.sigma_hidden.is_empty() {
            return bad("networks need at least one hidden layer");
        }
        if self.mu_hidden.iter().chain(&self.sigma_hidden).any(|&w| w == 0) {
            return bad("hidden widths must be >= 1");
        }
        if self.dpm.k == 0 || self.dpm.embed_dim < 2 || self.dpm.hidden == 0 {
            return bad("dpm needs k >= 1, embed_dim >= 2, hidden >= 1");
        }
        if !(self.dpm.sigma_aug_scale >= 0.0 && self.dpm.contrast > 0.0 && self.dpm.kernel_width > 0.0) {
            return bad("dpm needs sigma_aug_scale >= 0, contrast > 0 and kernel_width > 0");
        }
        if !(self.prior.var_scale > 0.0) {
            return bad("prior.var_scale must be positive");
        }
        self.ncl.validate()?;
        self.loss.validate()
    }
}
