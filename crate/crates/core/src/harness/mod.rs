//! Training, evaluation and annotation workflows plus their shared config.

pub mod annotate;
pub mod evaluate;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::DatasetConfig;

pub use annotate::{dedup, dedup_distances, fuse_annotations, resolve_vote, uncertainty, AnnotationBundle, CountRule, FuseOutcome};
pub use evaluate::{evaluate_model, evaluate_predictions, predict_image, EvalSettings, EvaluationReport};
pub use train::{load_split, train, TrainConfig, TrainOutcome};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable selecting the compute device.
pub const DEVICE_VAR: &str = "PBD_DEVICE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateConfig {
    pub dedup_threshold: f64,
    pub uncertainty_threshold: f64,
    pub deviation_px: f64,
    pub count_rule: CountRule,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        AnnotateConfig {
            dedup_threshold: 0.5,
            uncertainty_threshold: 0.5,
            deviation_px: 3.5,
            count_rule: CountRule::Unanimous,
        }
    }
}

/// Whole-pipeline configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "ModelConfig::desk")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluate: EvalSettings,
    #[serde(default)]
    pub annotate: AnnotateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            evaluate: EvalSettings::default(),
            annotate: AnnotateConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<config>".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PipelineConfig::from_toml(&text).map_err(|e| match e {
        Error::Parse { reason, .. } => Error::Parse {
            path: path.display().to_string(),
            reason,
        },
        e => e,
    })
}

/// Resolves the device from the environment. Only the CPU is available.
pub fn device() -> Result<String> {
    match std::env::var(DEVICE_VAR) {
        Err(_) => Ok("cpu".into()),
        Ok(v) if v.eq_ignore_ascii_case("cpu") => Ok("cpu".into()),
        Ok(v) => Err(Error::Config(format!("{DEVICE_VAR}={v}: only `cpu` is supported"))),
    }
}
