//! Flat `key = value` training configuration.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::fusion::ModelConfig;
use crate::losses::LossWeights;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("inconsistent configuration: {0}")]
    Inconsistent(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patch: usize,
    pub seed: u64,
    pub bins: usize,
    pub queries: usize,
    pub embed_dim: usize,
    pub groups: usize,
    pub heads: usize,
    pub base_width: usize,
    pub hist_hidden: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Supervise the coarse output with an extra L1 term at weight 1.
    pub aux_coarse_loss: bool,
    pub eq1_unscaled: bool,
    /// Random rotations and flips before cropping.
    pub augment: bool,
    /// Seed of the random perceptual extractor.
    pub perceptual_seed: u64,
    /// Optional extractor weight file replacing the random one.
    pub perceptual_weights: Option<String>,
    /// Stop after this many steps when non-zero.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            lr_start: 1e-4,
            lr_end: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            batch_size: 4,
            patch: 64,
            seed: 0,
            bins: 64,
            queries: 8,
            embed_dim: 64,
            groups: 3,
            heads: 4,
            base_width: 16,
            hist_hidden: 64,
            alpha: 0.5,
            beta: 0.05,
            aux_coarse_loss: true,
            eq1_unscaled: false,
            augment: true,
            perceptual_seed: 0,
            perceptual_weights: None,
            max_steps: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        msg: e.to_string(),
    })
}

impl TrainConfig {
    pub const KEYS: [&'static str; 25] = [
        "epochs",
        "lr_start",
        "lr_end",
        "beta1",
        "beta2",
        "eps",
        "weight_decay",
        "batch_size",
        "patch",
        "seed",
        "bins",
        "queries",
        "embed_dim",
        "groups",
        "heads",
        "base_width",
        "hist_hidden",
        "alpha",
        "beta",
        "aux_coarse_loss",
        "eq1_unscaled",
        "augment",
        "perceptual_seed",
        "perceptual_weights",
        "max_steps",
    ];

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "lr_start" => self.lr_start = parse(key, value)?,
            "lr_end" => self.lr_end = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "bins" => self.bins = parse(key, value)?,
            "queries" => self.queries = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "groups" => self.groups = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "base_width" => self.base_width = parse(key, value)?,
            "hist_hidden" => self.hist_hidden = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "aux_coarse_loss" => self.aux_coarse_loss = parse(key, value)?,
            "eq1_unscaled" => self.eq1_unscaled = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "perceptual_seed" => self.perceptual_seed = parse(key, value)?,
            "perceptual_weights" => {
                self.perceptual_weights = if value.is_empty() { None } else { Some(value.to_string()) }
            }
            "max_steps" => self.max_steps = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            self.set(k, v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Every field, one `key = value` line each, in [`Self::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            writeln!(s, "{key} = {}", self.get(key).expect("listed key")).expect("writing to a String");
        }
        s
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "lr_start" => self.lr_start.to_string(),
            "lr_end" => self.lr_end.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "patch" => self.patch.to_string(),
            "seed" => self.seed.to_string(),
            "bins" => self.bins.to_string(),
            "queries" => self.queries.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "groups" => self.groups.to_string(),
            "heads" => self.heads.to_string(),
            "base_width" => self.base_width.to_string(),
            "hist_hidden" => self.hist_hidden.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "aux_coarse_loss" => self.aux_coarse_loss.to_string(),
            "eq1_unscaled" => self.eq1_unscaled.to_string(),
            "augment" => self.augment.to_string(),
            "perceptual_seed" => self.perceptual_seed.to_string(),
            "perceptual_weights" => self.perceptual_weights.clone().unwrap_or_default(),
            "max_steps" => self.max_steps.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Inconsistent(m.to_string()));
        if !(self.lr_end <= self.lr_start) || self.lr_end < 0.0 {
            return bad("need 0 <= lr_end <= lr_start");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
            return bad("eps must be positive; weight_decay, alpha and beta non-negative");
        }
        if self.patch < 8 || !self.patch.is_power_of_two() {
            return bad("patch must be a power of two of at least 8");
        }
        self.model()
            .validate()
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            base_width: self.base_width,
            queries: self.queries,
            embed_dim: self.embed_dim,
            groups: self.groups,
            heads: self.heads,
            bins: self.bins,
            hist_hidden: self.hist_hidden,
            eq1_unscaled: self.eq1_unscaled,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}
