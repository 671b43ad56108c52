//! Flat `key = value` run configuration.
//!
//! One pair per line; `#` starts a comment. Every key may appear at most
//! once, unknown keys are rejected, and missing keys keep their defaults.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use octgan_core::gan::TrainConfig;
use octgan_core::phantom::DatasetConfig;
use octgan_core::{Error, Result};

/// Every accepted key, in the order the README documents them.
pub const KEYS: [&str; 29] = [
    "out",
    "steps",
    "batch_size",
    "latent_dim",
    "seed",
    "sample_every",
    "checkpoint_every",
    "sample_count",
    "sample_seed",
    "lr_g",
    "beta1_g",
    "beta2_g",
    "eps_g",
    "lr_d",
    "beta1_d",
    "beta2_d",
    "eps_d",
    "dataset_count",
    "dataset_seed",
    "class_mix",
    "speckle_min",
    "speckle_max",
    "read_noise_min",
    "read_noise_max",
    "flip",
    "max_translate",
    "contrast_min",
    "contrast_max",
    "noise_sigma",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    /// Output directory; a command-line `--out` takes precedence.
    pub out: Option<PathBuf>,
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse()
        .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{raw}`: {e}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, val)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)));
            };
            let (key, val) = (key.trim(), val.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown config key `{key}`", i + 1)));
            }
            if !seen.insert(key) {
                return Err(Error::Config(format!("line {}: key `{key}` given twice", i + 1)));
            }
            config.set(key, val)?;
        }
        config.validate()?;
        Ok(config)
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.dataset;
        match key {
            "out" => self.out = Some(PathBuf::from(raw)),
            "steps" => t.steps = value(key, raw)?,
            "batch_size" => t.batch_size = value(key, raw)?,
            "latent_dim" => t.latent_dim = value(key, raw)?,
            "seed" => t.seed = value(key, raw)?,
            "sample_every" => t.sample_every = value(key, raw)?,
            "checkpoint_every" => t.checkpoint_every = value(key, raw)?,
            "sample_count" => t.sample_count = value(key, raw)?,
            "sample_seed" => t.sample_seed = value(key, raw)?,
            "lr_g" => t.adam_g.lr = value(key, raw)?,
            "beta1_g" => t.adam_g.beta1 = value(key, raw)?,
            "beta2_g" => t.adam_g.beta2 = value(key, raw)?,
            "eps_g" => t.adam_g.eps = value(key, raw)?,
            "lr_d" => t.adam_d.lr = value(key, raw)?,
            "beta1_d" => t.adam_d.beta1 = value(key, raw)?,
            "beta2_d" => t.adam_d.beta2 = value(key, raw)?,
            "eps_d" => t.adam_d.eps = value(key, raw)?,
            "dataset_count" => d.count = value(key, raw)?,
            "dataset_seed" => d.seed = value(key, raw)?,
            "class_mix" => d.mix = value(key, raw)?,
            "speckle_min" => d.noise.speckle.0 = value(key, raw)?,
            "speckle_max" => d.noise.speckle.1 = value(key, raw)?,
            "read_noise_min" => d.noise.read_noise.0 = value(key, raw)?,
            "read_noise_max" => d.noise.read_noise.1 = value(key, raw)?,
            "flip" => d.augment.flip = value(key, raw)?,
            "max_translate" => d.augment.max_translate = value(key, raw)?,
            "contrast_min" => d.augment.contrast.0 = value(key, raw)?,
            "contrast_max" => d.augment.contrast.1 = value(key, raw)?,
            "noise_sigma" => d.augment.noise_sigma = value(key, raw)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.dataset.count < 1 {
            return Err(Error::Config("dataset_count must be >= 1".into()));
        }
        self.dataset.mix.validate()?;
        self.dataset.augment.validate()?;
        self.dataset.noise.validate()
    }
}
