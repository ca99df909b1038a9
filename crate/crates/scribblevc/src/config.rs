//! One JSON document configures a run; every section has defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use scribblevc_core::dataset::GeneratorConfig;
use scribblevc_core::metrics::PredictionPolicy;
use scribblevc_core::model::ModelConfig;
use scribblevc_core::train::TrainConfig;

use crate::error::{Error, Result};
use crate::synth::SynthConfig;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub policy: PredictionPolicy,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            policy: PredictionPolicy::Mean,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Training-set sizes for the sensitivity sweep.
    pub sizes: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            sizes: vec![4, 8, 16, 32],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    /// Settings that fit a laptop CPU: 64x64 inputs, four stages, 200
    /// epochs at learning rate 1e-3 with batch size 2.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.train.lr = 1e-3;
        cfg.train.batch_size = 2;
        cfg.train.epochs = 200;
        cfg
    }

    /// The reduced setting used by the ablation and sensitivity grids:
    /// 32x32 inputs, three stages, 32 training images.
    pub fn benchmark() -> Self {
        let mut cfg = Self::desk();
        cfg.model.height = 32;
        cfg.model.width = 32;
        cfg.model.num_stages = 3;
        cfg.synth.generator = GeneratorConfig::new(32, 32, 3, 0.05);
        cfg.synth.train_samples = 32;
        cfg.synth.val_samples = 16;
        cfg.synth.budget = 0.1;
        cfg.train.epochs = 60;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Parses and validates; relative manifest paths are resolved against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train_manifest, &mut cfg.data.val_manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides every seed the run draws from.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::desk().validate().unwrap();
        RunConfig::benchmark().validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_partial_documents() {
        let cfg = RunConfig::benchmark();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.model, ModelConfig::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 3}}"#).is_err());
    }
}
