use std::path::{Path, PathBuf};

use anyhow::Context;
use ciff_core::data::SynthConfig;
use ciff_core::experiment::Experiment;
use ciff_core::model::ModelConfig;
use ciff_core::train::{TrainConfig, ABLATION_LEARNING_RATES};
use serde::{Deserialize, Serialize};

/// One JSON document describing a whole run. Missing keys take their
/// defaults, unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory holding `manifest.csv` and `images/`. Without one
    /// the dataset is generated in memory from `synth`.
    pub data: Option<PathBuf>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    /// False runs the phase-1 baseline only.
    pub context: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: None,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            folds: 5,
            context: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum LrPreset {
    /// 1e-3, 1e-4, 1e-5
    Setup,
    /// 0.01, 0.0075, 0.006
    Ablation,
}

impl LrPreset {
    pub fn rates(self) -> [f64; 3] {
        match self {
            LrPreset::Setup => TrainConfig::default().learning_rates,
            LrPreset::Ablation => ABLATION_LEARNING_RATES,
        }
    }
}

impl RunConfig {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            model: self.model.clone(),
            train: self.train.clone(),
            folds: self.folds,
            seed: self.seed,
            context: self.context,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.synth.validate()?;
        self.experiment().validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
