//! Run configuration file: TOML with one section per pipeline stage.
//!
//! ```toml
//! seed = 3
//!
//! [generator]
//! encoder_widths = [16, 32, 64, 128]
//!
//! [loss]
//! lambda_perceptual = 0.0
//!
//! [train]
//! resolution = 64
//! max_iterations = 500
//!
//! [datasmith]
//! stride = 5
//!
//! [eval]
//! strides = [1, 5, 10]
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::path::Path;

use linecolor::datasmith::{DatasetConfig, UNCHANGED_THRESHOLD};
use linecolor::generator::GeneratorConfig;
use linecolor::losses::LossConfig;
use linecolor::trainer::TrainConfig;
use linecolor::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub resolution: usize,
    pub checkpoint_interval: usize,
    pub max_iterations: Option<usize>,
    pub progress_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_epsilon: t.adam_epsilon,
            batch_size: t.batch_size,
            epochs: t.epochs,
            resolution: t.resolution,
            checkpoint_interval: t.checkpoint_interval,
            max_iterations: t.max_iterations,
            progress_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub strides: Vec<usize>,
    pub unchanged_threshold: f64,
    /// Feed each prediction back in as the next reference.
    pub chain: bool,
    /// Resize evaluation frames to this square size first.
    pub resolution: Option<usize>,
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            strides: vec![1, 5, 10],
            unchanged_threshold: UNCHANGED_THRESHOLD,
            chain: false,
            resolution: None,
            warmup: 2,
            repeats: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub datasmith: DatasetConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_epsilon: t.adam_epsilon,
            batch_size: t.batch_size,
            epochs: t.epochs,
            resolution: t.resolution,
            seed: self.seed,
            checkpoint_interval: t.checkpoint_interval,
            max_iterations: t.max_iterations,
            loss: self.loss.clone(),
            generator: GeneratorConfig {
                seed: self.seed,
                ..self.generator.clone()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.datasmith.validate()?;
        let e = &self.eval;
        if e.strides.is_empty() || e.strides.iter().any(|s| !(1..=10).contains(s)) {
            return Err(Error::Config("eval strides must lie in 1..=10".into()));
        }
        if e.repeats < 3 {
            return Err(Error::Config("benchmark needs at least 3 repeats".into()));
        }
        if let Some(r) = e.resolution {
            if r == 0 || r % 8 != 0 {
                return Err(Error::Config(format!("eval resolution {r} is not a multiple of 8")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn sections_and_unknown_keys() {
        let c = RunConfig::parse("seed = 4\n[train]\nresolution = 64\n[generator]\nru_blocks = 1\n").unwrap();
        let t = c.train_config();
        assert_eq!((t.seed, t.generator.seed, t.resolution, t.generator.ru_blocks), (4, 4, 64, 1));
        assert!(RunConfig::parse("[train]\nlearning_rat = 1.0\n").is_err());
        assert!(RunConfig::parse("[bogus]\n").is_err());
        let bad = RunConfig::parse("[eval]\nstrides = [0]\n").unwrap();
        assert!(bad.validate().is_err());
    }
}
