//! Experiment configuration: one TOML file with a table per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bev::GridSpec;
use crate::da::{SegTrainConfig, TrainConfig};
use crate::error::{Error, IoContext, Result};
use crate::eval::EvalConfig;
use crate::scene::{LidarModel, PerturbConfig, SceneConfig};

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every random stream of every command derives from it.
    pub seed: u64,
    /// Default root for command outputs.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub lidar: LidarModel,
    #[serde(default)]
    pub perturb: PerturbConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub segmenter: SegTrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            output_dir: default_output_dir(),
            scene: SceneConfig::default(),
            lidar: LidarModel::default(),
            perturb: PerturbConfig::default(),
            grid: GridSpec::default(),
            segmenter: SegTrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        self.scene.validate()?;
        self.lidar.validate()?;
        self.perturb.validate()?;
        self.grid.validate()?;
        self.segmenter.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Parses and validates; parse errors name the offending key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML with every key spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}
