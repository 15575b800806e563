//! Run configuration as a versioned TOML document. Unknown keys are
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Resize;
use crate::episode::{hex, EpisodeSpec};
use crate::error::{LdcaError, Result};
use crate::eval::EvalOptions;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub episodes: usize,
    pub k: usize,
    pub split: String,
    pub repeats: u64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ways: 5,
            shots: 1,
            queries: 15,
            episodes: 600,
            k: 1,
            split: "test".into(),
            repeats: 1,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn options(&self, repeat: u64) -> EvalOptions {
        EvalOptions {
            spec: EpisodeSpec {
                ways: self.ways,
                shots: self.shots,
                queries: self.queries,
                split: self.split.clone(),
                seed: self.seed,
            },
            episodes: self.episodes,
            k: self.k,
            bypass: false,
            repeat,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub resize: Resize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// Desk-scale model and schedule.
    pub fn desk(seed: u64) -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            model: ModelConfig::desk(),
            train: TrainConfig::desk(seed),
            eval: EvalConfig {
                seed,
                ..EvalConfig::default()
            },
            data: DataConfig::default(),
            output: OutputConfig::default(),
        }
    }

    /// Full-size model and schedule.
    pub fn full(seed: u64) -> Self {
        RunConfig {
            model: ModelConfig::full(),
            train: TrainConfig::full(seed),
            ..Self::desk(seed)
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            LdcaError::Usage(format!(
                "malformed config: {}",
                e.to_string().replace('\n', " ")
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LdcaError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LdcaError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(LdcaError::Usage(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.eval.options(0).spec.validate()?;
        if self.eval.episodes == 0 || self.eval.repeats == 0 || self.eval.k == 0 {
            return Err(LdcaError::Config(
                "eval episodes, repeats and k must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Hash of every hyperparameter (paths excluded).
    pub fn fingerprint(&self) -> String {
        let fields = serde_json::json!({
            "version": self.version,
            "model": self.model,
            "train": self.train,
            "eval": self.eval,
            "resize": self.data.resize,
        });
        hex(&Sha256::digest(fields.to_string().as_bytes())[..16])
    }
}
