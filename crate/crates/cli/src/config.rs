//! Training settings from defaults, an optional `key=value` file, and flags.

use std::fmt::Display;
use std::str::FromStr;

use ngc_core::model::{ModelConfig, Variant};
use ngc_core::skeleton::GraphMode;
use ngc_core::train::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: key `{key}` set twice")]
    Duplicate { line: usize, key: String },
    #[error("config line {line}: bad value for `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
}

pub const DEFAULT_TAU: usize = 10;
pub const DEFAULT_HORIZON: usize = 10;

/// Every key a config file may set.
pub const KEYS: &[&str] = &[
    "lambda",
    "epochs",
    "seed",
    "tau",
    "horizon",
    "batch_size",
    "lr",
    "lr_decay",
    "lr_decay_every",
    "huber_beta",
    "gamma_p",
    "tf_decay",
    "crf_alpha",
    "val_fraction",
    "variant",
    "graph",
    "shared_qk",
    "batchnorm",
    "tc_hidden",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub tau: usize,
    pub horizon: usize,
    pub variant: Variant,
    pub graph: GraphMode,
    pub shared_qk: bool,
    pub batchnorm: bool,
    pub tc_hidden: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let m = ModelConfig::new(1, DEFAULT_TAU, DEFAULT_HORIZON, 1);
        Self {
            train: TrainConfig::default(),
            tau: m.tau,
            horizon: m.horizon,
            variant: m.variant,
            graph: m.graph,
            shared_qk: m.shared_qk,
            batchnorm: m.batchnorm,
            tc_hidden: m.tc_hidden,
        }
    }
}

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| e.to_string())
}

impl Settings {
    /// Sets one key from its text form. Keys may use `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key.replace('-', "_").as_str() {
            "lambda" => t.lambda = parse(value)?,
            "epochs" => t.epochs = parse(value)?,
            "seed" => t.seed = parse(value)?,
            "tau" => self.tau = parse(value)?,
            "horizon" => self.horizon = parse(value)?,
            "batch_size" => t.batch_size = parse(value)?,
            "lr" => t.lr = parse(value)?,
            "lr_decay" => t.lr_decay = parse(value)?,
            "lr_decay_every" => t.lr_decay_every = parse(value)?,
            "huber_beta" => t.huber_beta = parse(value)?,
            "gamma_p" => t.gamma_p = parse(value)?,
            "tf_decay" => t.tf_decay = parse(value)?,
            "crf_alpha" => t.crf_alpha = parse(value)?,
            "val_fraction" => t.val_fraction = parse(value)?,
            "variant" => self.variant = parse(value)?,
            "graph" => self.graph = parse(value)?,
            "shared_qk" => self.shared_qk = parse(value)?,
            "batchnorm" => self.batchnorm = parse(value)?,
            "tc_hidden" => self.tc_hidden = parse(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Applies a config file: `key = value` lines, `#` starts a comment.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: body.to_string(),
            })?;
            let key = key.trim().replace('-', "_");
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    text: body.to_string(),
                });
            }
            if !KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { line, key });
            }
            if seen.contains(&key) {
                return Err(ConfigError::Duplicate { line, key });
            }
            self.set(&key, value).map_err(|msg| ConfigError::Value {
                line,
                key: key.clone(),
                msg,
            })?;
            seen.push(key);
        }
        Ok(())
    }

    pub fn model_config(&self, n_joints: usize, n_labels: usize) -> ModelConfig {
        ModelConfig {
            graph: self.graph,
            variant: self.variant,
            shared_qk: self.shared_qk,
            batchnorm: self.batchnorm,
            tc_hidden: self.tc_hidden,
            ..ModelConfig::new(n_joints, self.tau, self.horizon, n_labels)
        }
    }
}
