//! Declarative run configuration: a TOML file merged with `BSEFUSE_<SECTION>_<KEY>`
//! environment overrides and command-line flags, in that order of precedence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::dataio::SynthConfig;
use crate::error::{Error, Result};
use crate::metrics::report::ReportFormat;
use crate::model::ModelKind;
use crate::nn::network::default_weights_dir;
use crate::nn::{FreezePolicy, InflationPolicy, WeightSource};
use crate::training::{RecipeConfig, TrainConfig};
use crate::types::Modality;

pub const ENV_PREFIX: &str = "BSEFUSE_";
pub const SECTIONS: [&str; 5] = ["data", "model", "train", "eval", "io"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// JSON-lines manifest. When absent, `synth` must be set.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Synthetic dataset generated into `<run_dir>/data`.
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    /// Precomputed split plan; otherwise the split is derived from the seed.
    #[serde(default)]
    pub split: Option<PathBuf>,
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "defaults::folds")]
    pub folds: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synth: None,
            split: None,
            test_fraction: defaults::test_fraction(),
            folds: defaults::folds(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsMode {
    /// Pretrained if both backbone files are cached, seeded otherwise.
    Auto,
    Pretrained,
    Seeded,
}

impl std::str::FromStr for WeightsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "pretrained" => Ok(Self::Pretrained),
            "seeded" => Ok(Self::Seeded),
            other => Err(Error::Config(format!("unknown weights mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::architecture")]
    pub architecture: ModelKind,
    #[serde(default = "defaults::alexnet_freeze")]
    pub alexnet_freeze: FreezePolicy,
    #[serde(default = "defaults::resnet_freeze")]
    pub resnet_freeze: FreezePolicy,
    #[serde(default = "defaults::inflation")]
    pub inflation: InflationPolicy,
    #[serde(default = "defaults::weights")]
    pub weights: WeightsMode,
    #[serde(default)]
    pub weights_seed: u64,
    /// Models run by `compare`.
    #[serde(default = "defaults::compare_models")]
    pub compare_models: Vec<ModelKind>,
    /// Modalities run by `compare`.
    #[serde(default = "defaults::compare_modalities")]
    pub compare_modalities: Vec<Modality>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: defaults::architecture(),
            alexnet_freeze: defaults::alexnet_freeze(),
            resnet_freeze: defaults::resnet_freeze(),
            inflation: defaults::inflation(),
            weights: defaults::weights(),
            weights_seed: 0,
            compare_models: defaults::compare_models(),
            compare_modalities: defaults::compare_modalities(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Image,
    Patient,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "defaults::granularity")]
    pub granularity: Granularity,
    #[serde(default = "defaults::formats")]
    pub formats: Vec<ReportFormat>,
    /// Add the soft-voting baseline rows for ensemble runs.
    #[serde(default)]
    pub voting: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            granularity: defaults::granularity(),
            formats: defaults::formats(),
            voting: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    #[serde(default)]
    pub run_dir: Option<PathBuf>,
    /// Pretrained weight cache; defaults to `$BSEFUSE_WEIGHTS_DIR` or
    /// `~/.cache/bsefuse/weights`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub io: IoConfig,
}

mod defaults {
    use super::*;

    pub fn test_fraction() -> f64 {
        0.2
    }
    pub fn folds() -> usize {
        crate::dataio::split::DEFAULT_FOLDS
    }
    pub fn architecture() -> ModelKind {
        ModelKind::Ensemble
    }
    pub fn alexnet_freeze() -> FreezePolicy {
        FreezePolicy::AlexNetLast3
    }
    pub fn resnet_freeze() -> FreezePolicy {
        FreezePolicy::ResNetFreezeFirst4
    }
    pub fn inflation() -> InflationPolicy {
        InflationPolicy::MeanInit
    }
    pub fn weights() -> WeightsMode {
        WeightsMode::Auto
    }
    pub fn compare_models() -> Vec<ModelKind> {
        vec![ModelKind::AlexNet, ModelKind::ResNet18, ModelKind::Ensemble]
    }
    pub fn compare_modalities() -> Vec<Modality> {
        vec![Modality::Bse]
    }
    pub fn granularity() -> Granularity {
        Granularity::Both
    }
    pub fn formats() -> Vec<ReportFormat> {
        vec![ReportFormat::Csv, ReportFormat::Json]
    }
}

/// `(section, key, value)` override.
pub type Override = (String, String, Value);

/// Parse an override value as a TOML literal, falling back to a string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Overrides from `BSEFUSE_<SECTION>_<KEY>` variables. Variables whose
/// section is not a config section (e.g. `BSEFUSE_WEIGHTS_DIR`) are ignored.
pub fn env_overrides<I: IntoIterator<Item = (String, String)>>(vars: I) -> Vec<Override> {
    let mut out: Vec<Override> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?.to_ascii_lowercase();
            let (section, key) = rest.split_once('_')?;
            SECTIONS
                .contains(&section)
                .then(|| (section.to_string(), key.to_string(), parse_value(&v)))
        })
        .collect();
    out.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
    out
}

fn apply(table: &mut Table, overrides: &[Override]) -> Result<()> {
    for (section, key, value) in overrides {
        if !SECTIONS.contains(&section.as_str()) {
            return Err(Error::Config(format!("unknown config section {section:?}")));
        }
        let entry = table
            .entry(section.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        let Value::Table(t) = entry else {
            return Err(Error::Config(format!("{section} is not a table")));
        };
        t.insert(key.clone(), value.clone());
    }
    Ok(())
}

impl RunConfig {
    /// Merge file < env < flags and validate.
    pub fn merge(file: Option<&Path>, env: &[Override], flags: &[Override]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        apply(&mut table, env)?;
        apply(&mut table, flags)?;
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let d = &self.data;
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction {} outside (0, 1)", d.test_fraction)));
        }
        if d.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", d.folds)));
        }
        if let Some(s) = &d.synth {
            s.validate()?;
        }
        if self.eval.formats.is_empty() {
            return Err(Error::Config("eval.formats is empty".into()));
        }
        Ok(())
    }

    pub fn weights_dir(&self) -> PathBuf {
        self.io.cache_dir.clone().unwrap_or_else(default_weights_dir)
    }

    /// Resolve the weight source; `auto` falls back to seeded weights when
    /// the cache lacks either backbone.
    pub fn weight_source(&self) -> WeightSource {
        let dir = self.weights_dir();
        match self.model.weights {
            WeightsMode::Pretrained => WeightSource::Pretrained(dir),
            WeightsMode::Seeded => WeightSource::Seeded(self.model.weights_seed),
            WeightsMode::Auto => {
                let cached = ["alexnet", "resnet18"]
                    .iter()
                    .all(|a| dir.join(format!("{a}.safetensors")).is_file());
                if cached {
                    WeightSource::Pretrained(dir)
                } else {
                    log::warn!(
                        "no pretrained weights in {}; using seeded initialization {}",
                        dir.display(),
                        self.model.weights_seed
                    );
                    WeightSource::Seeded(self.model.weights_seed)
                }
            }
        }
    }

    pub fn recipe(&self, model: ModelKind) -> RecipeConfig {
        RecipeConfig {
            model,
            weights: self.weight_source(),
            inflation: self.model.inflation,
            alexnet_freeze: self.model.alexnet_freeze.clone(),
            resnet_freeze: self.model.resnet_freeze.clone(),
        }
    }
}
