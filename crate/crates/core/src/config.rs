//! Experiment configuration files (TOML, one section per stage).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::backbone::{AttentionKind, EncoderKind, EncoderSpec};
use crate::data::{DatasetKind, MissingPolicy, SplitSpec};
use crate::loss::{LossChoice, LossConfig, SsclAlgorithm};
use crate::strategy::{Scheduler, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    EndToEnd,
    TwoStepRidge,
    TwoStepMlp,
    Finetune,
}

/// One column of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub strategy: StrategyKind,
    /// End-to-end objective.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossChoice>,
    /// Pretraining objective of two-step strategies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sscl: Option<SsclAlgorithm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl MethodSpec {
    pub fn end_to_end(loss: LossChoice) -> Self {
        Self { strategy: StrategyKind::EndToEnd, loss: Some(loss), sscl: None, label: None }
    }

    pub fn two_step(strategy: StrategyKind, sscl: SsclAlgorithm) -> Self {
        Self { strategy, loss: None, sscl: Some(sscl), label: None }
    }

    /// Column label, e.g. `MSE`, `+MoCo2`, `EC+MLP(MoCo2)`, `FT(HCL)`.
    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let algo = self.sscl.map(|a| a.label()).unwrap_or("?");
        match self.strategy {
            StrategyKind::EndToEnd => self.loss.map(|l| l.label()).unwrap_or("?").to_string(),
            StrategyKind::TwoStepRidge => format!("EC+Ridge({algo})"),
            StrategyKind::TwoStepMlp => format!("EC+MLP({algo})"),
            StrategyKind::Finetune => format!("FT({algo})"),
        }
    }

    /// Strategy/loss compatibility.
    pub fn validate(&self, idx: usize) -> Result<()> {
        let field = |f: &str| format!("methods[{idx}].{f}");
        match self.strategy {
            StrategyKind::EndToEnd => {
                if self.loss.is_none() {
                    return Err(Error::config(field("loss"), "end_to_end needs a loss choice"));
                }
                if self.sscl.is_some() {
                    return Err(Error::config(
                        field("sscl"),
                        "end_to_end takes its auxiliary objective from `loss`; remove `sscl`",
                    ));
                }
            }
            _ => {
                if self.sscl.is_none() {
                    return Err(Error::config(field("sscl"), "two-step strategies need an SSCL algorithm"));
                }
                if self.loss.is_some() {
                    return Err(Error::config(field("loss"), "two-step strategies train heads with MSE; remove `loss`"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub features: usize,
    pub period: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    #[serde(default = "default_kind")]
    pub kind: DatasetKind,
    /// CSV source; relative paths resolve against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Generated series used instead of a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default = "default_missing")]
    pub missing: MissingPolicy,
    #[serde(default)]
    pub hourly: bool,
    #[serde(default)]
    pub split: SplitSpec,
    /// Fixed lookback for every horizon; unset means `min(2·T, 336)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookback: Option<usize>,
    /// Per-horizon lookback overrides keyed by the horizon as a string.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub lookback_per_horizon: BTreeMap<String, usize>,
}

fn default_kind() -> DatasetKind {
    DatasetKind::Custom
}
fn default_missing() -> MissingPolicy {
    MissingPolicy::Reject
}
pub const MAX_DEFAULT_LOOKBACK: usize = 336;

impl DatasetConfig {
    pub fn lookback_for(&self, horizon: usize) -> usize {
        self.lookback_per_horizon
            .get(&horizon.to_string())
            .copied()
            .or(self.lookback)
            .unwrap_or((2 * horizon).min(MAX_DEFAULT_LOOKBACK))
    }
}

/// Encoder overrides on top of the per-kind defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: EncoderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tcn_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ff_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probsparse_factor: Option<f64>,
}

impl BackboneConfig {
    pub fn resolve(&self, input_dim: usize) -> EncoderSpec {
        let d = EncoderSpec::default_for(self.kind, input_dim);
        EncoderSpec {
            kind: self.kind,
            input_dim,
            hidden_dim: self.hidden_dim.unwrap_or(d.hidden_dim),
            num_layers: self.num_layers.unwrap_or(d.num_layers),
            kernel_size: self.kernel_size.unwrap_or(d.kernel_size),
            tcn_channels: self.tcn_channels.unwrap_or(d.tcn_channels),
            num_heads: self.num_heads.unwrap_or(d.num_heads),
            ff_dim: self.ff_dim.unwrap_or(d.ff_dim),
            attention: self.attention.unwrap_or(d.attention),
            probsparse_factor: self.probsparse_factor.unwrap_or(d.probsparse_factor),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErfConfig {
    pub enabled: bool,
    /// Validation window indices to visualize.
    pub windows: Vec<usize>,
    /// Target steps `j`.
    pub steps: Vec<usize>,
    /// One color scale for all panels instead of per-panel scaling.
    pub shared_scale: bool,
}

impl Default for ErfConfig {
    fn default() -> Self {
        Self { enabled: false, windows: vec![0], steps: vec![0], shared_scale: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub horizons: Vec<usize>,
    #[serde(default)]
    pub raw_scale_metrics: bool,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub erf: ErfConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// Turns a TOML error into a field-level config error.
fn toml_error(e: toml::de::Error) -> Error {
    let msg = e.message().to_string();
    let field = msg
        .strip_prefix("unknown field `")
        .and_then(|r| r.split('`').next())
        .map(|s| s.to_string())
        .or_else(|| msg.strip_prefix("missing field `").and_then(|r| r.split('`').next()).map(|s| s.to_string()))
        .unwrap_or_else(|| "<document>".to_string());
    Error::Config { field, message: e.to_string().trim().to_string() }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path` and resolves relative dataset paths against its folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(p) = &cfg.dataset.path {
            if p.is_relative() {
                if let Some(base) = path.parent() {
                    cfg.dataset.path = Some(base.join(p));
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    /// Checks every cross-field rule; runs before any compute.
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::config("horizons", "need at least one horizon, all ≥ 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "need at least one method"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            m.validate(i)?;
        }
        let mut labels: Vec<String> = self.methods.iter().map(|m| m.label()).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("methods", "two methods share a label; set `label` to disambiguate"));
        }
        match (&self.dataset.path, &self.dataset.synthetic) {
            (None, None) => return Err(Error::config("dataset.path", "set either `path` or `synthetic`")),
            (Some(_), Some(_)) => {
                return Err(Error::config("dataset.synthetic", "`path` and `synthetic` are mutually exclusive"))
            }
            _ => {}
        }
        if self.dataset.lookback == Some(0) || self.dataset.lookback_per_horizon.values().any(|&l| l == 0) {
            return Err(Error::config("dataset.lookback", "must be ≥ 1"));
        }
        for k in self.dataset.lookback_per_horizon.keys() {
            if k.parse::<usize>().is_err() {
                return Err(Error::config("dataset.lookback_per_horizon", format!("key `{k}` is not a horizon")));
            }
        }
        self.dataset.split.validate().map_err(|e| Error::config("dataset.split", e.to_string()))?;
        self.loss.validate()?;
        self.train.validate()?;
        self.augment.validate().map_err(|e| Error::config("augment", e.to_string()))?;
        if self.erf.enabled && self.erf.steps.iter().any(|&j| self.horizons.iter().all(|&h| j >= h)) {
            return Err(Error::config("erf.steps", "every target step must lie inside some horizon"));
        }
        let spec = self.backbone.resolve(1);
        spec.validate().map_err(|e| Error::config("backbone", e.to_string()))?;
        Ok(())
    }

    /// Scheduler each method will train with.
    pub fn scheduler_for(&self, m: &MethodSpec) -> Scheduler {
        let algo = m.loss.and_then(|l| l.sscl()).or(m.sscl);
        match m.strategy {
            StrategyKind::EndToEnd => self.train.scheduler_for(algo),
            _ => self.train.scheduler,
        }
    }
}
