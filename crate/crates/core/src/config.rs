//! Flat `key=value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every key is checked
//! against the registry in [`RunConfig::set`], so unknown keys, malformed
//! values and out-of-range values are rejected with the offending line.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::NetworkConfig;
use crate::routing::GradMode;
use crate::training::{AugmentConfig, TrainConfig};

/// Keys describing the architecture; these form the checkpoint config echo.
pub const NETWORK_KEYS: &[&str] = &[
    "input_size",
    "stem_channels",
    "transition_channels",
    "n_dense_blocks",
    "layers_per_block",
    "growth_rate",
    "bottleneck_width",
    "head_channels",
    "head_kernel",
    "routing_iters",
    "caps_dim_class",
    "n_classes",
    "grad_mode",
    "routed",
    "init_std",
];

pub const TRAINING_KEYS: &[&str] = &[
    "epochs",
    "seed",
    "batch_size",
    "eval_batch_size",
    "switch_epoch",
    "m_plus",
    "m_minus",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "augment",
    "flip_prob",
    "brightness",
    "contrast_min",
    "contrast_max",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub epochs: usize,
    pub seed: u64,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::desk(),
            train: TrainConfig::default(),
            epochs: 10,
            seed: 0,
            eval_batch_size: 32,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn positive(key: &str, value: &str) -> Result<usize> {
    let v: usize = parse(key, value)?;
    if v == 0 {
        return Err(Error::Config(format!("{key} must be >= 1")));
    }
    Ok(v)
}

fn real(key: &str, value: &str, lo: f64, hi: f64) -> Result<f64> {
    let v: f64 = parse(key, value)?;
    if !(lo..=hi).contains(&v) {
        return Err(Error::Config(format!("{key} = {v} outside [{lo}, {hi}]")));
    }
    Ok(v)
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value {value:?} for {key}; expected true or false"
        ))),
    }
}

pub fn grad_mode_name(mode: GradMode) -> &'static str {
    match mode {
        GradMode::None => "none",
        GradMode::Last => "last",
    }
}

/// Applies one architecture key to `cfg`.
pub fn set_network_key(cfg: &mut NetworkConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "input_size" => cfg.input_size = positive(key, value)?,
        "stem_channels" => cfg.stem_channels = positive(key, value)?,
        "transition_channels" => cfg.transition_channels = positive(key, value)?,
        "n_dense_blocks" => cfg.n_dense_blocks = positive(key, value)?,
        "layers_per_block" => cfg.layers_per_block = positive(key, value)?,
        "growth_rate" => cfg.growth_rate = positive(key, value)?,
        "bottleneck_width" => cfg.bottleneck_width = positive(key, value)?,
        "head_channels" => cfg.head_channels = positive(key, value)?,
        "head_kernel" => cfg.head_kernel = positive(key, value)?,
        "routing_iters" => cfg.routing_iters = positive(key, value)?,
        "caps_dim_class" => cfg.caps_dim_class = positive(key, value)?,
        "n_classes" => cfg.n_classes = positive(key, value)?,
        "grad_mode" => {
            cfg.grad_mode = match value {
                "none" => GradMode::None,
                "last" => GradMode::Last,
                _ => return Err(Error::Config(format!("grad_mode must be none or last, got {value:?}"))),
            }
        }
        "routed" => cfg.routed = flag(key, value)?,
        "init_std" => cfg.init_std = real(key, value, f64::MIN_POSITIVE, 10.0)?,
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    }
    Ok(())
}

/// Architecture keys and values in [`NETWORK_KEYS`] order.
pub fn network_pairs(cfg: &NetworkConfig) -> Vec<(String, String)> {
    let values = [
        cfg.input_size.to_string(),
        cfg.stem_channels.to_string(),
        cfg.transition_channels.to_string(),
        cfg.n_dense_blocks.to_string(),
        cfg.layers_per_block.to_string(),
        cfg.growth_rate.to_string(),
        cfg.bottleneck_width.to_string(),
        cfg.head_channels.to_string(),
        cfg.head_kernel.to_string(),
        cfg.routing_iters.to_string(),
        cfg.caps_dim_class.to_string(),
        cfg.n_classes.to_string(),
        grad_mode_name(cfg.grad_mode).to_string(),
        cfg.routed.to_string(),
        cfg.init_std.to_string(),
    ];
    NETWORK_KEYS.iter().map(|k| k.to_string()).zip(values).collect()
}

/// Rebuilds a network configuration; every key must be present exactly once.
pub fn network_from_pairs(pairs: &[(String, String)]) -> Result<NetworkConfig> {
    let mut cfg = NetworkConfig::default();
    for key in NETWORK_KEYS {
        let n = pairs.iter().filter(|(k, _)| k == key).count();
        if n != 1 {
            return Err(Error::Config(format!("config echo has {n} entries for {key}")));
        }
    }
    for (k, v) in pairs {
        set_network_key(&mut cfg, k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "batch_size" => t.batch_size = positive(key, value)?,
            "eval_batch_size" => self.eval_batch_size = positive(key, value)?,
            "switch_epoch" => t.switch_epoch = parse(key, value)?,
            "m_plus" => t.loss.m_plus = real(key, value, 0.0, 1.0)?,
            "m_minus" => t.loss.m_minus = real(key, value, 0.0, 1.0)?,
            "lr" => t.adam.lr = real(key, value, 0.0, 1.0)?,
            "beta1" => t.adam.beta1 = real(key, value, 0.0, 0.999_999)?,
            "beta2" => t.adam.beta2 = real(key, value, 0.0, 0.999_999_999)?,
            "eps" => t.adam.eps = real(key, value, f64::MIN_POSITIVE, 1.0)?,
            "augment" => {
                t.augment = if flag(key, value)? {
                    Some(t.augment.unwrap_or_default())
                } else {
                    None
                }
            }
            "flip_prob" => self.augment_mut().flip_prob = real(key, value, 0.0, 1.0)?,
            "brightness" => {
                let b = real(key, value, 0.0, 1.0)?;
                self.augment_mut().brightness = (-b, b);
            }
            "contrast_min" => self.augment_mut().contrast.0 = real(key, value, 0.0, 10.0)?,
            "contrast_max" => self.augment_mut().contrast.1 = real(key, value, 0.0, 10.0)?,
            _ => return set_network_key(&mut self.network, key, value),
        }
        Ok(())
    }

    /// Augmentation parameters, enabling augmentation if it was off.
    fn augment_mut(&mut self) -> &mut AugmentConfig {
        self.train.augment.get_or_insert_with(AugmentConfig::default)
    }

    /// Applies every `key=value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.loss.validate()?;
        if let Some(a) = &self.train.augment {
            a.validate()?;
        }
        Ok(())
    }

    /// Renders every key; `apply_text` of the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let aug = t.augment.unwrap_or_default();
        let mut out = String::new();
        for (k, v) in network_pairs(&self.network) {
            let _ = writeln!(out, "{k}={v}");
        }
        let training = [
            self.epochs.to_string(),
            self.seed.to_string(),
            t.batch_size.to_string(),
            self.eval_batch_size.to_string(),
            t.switch_epoch.to_string(),
            t.loss.m_plus.to_string(),
            t.loss.m_minus.to_string(),
            t.adam.lr.to_string(),
            t.adam.beta1.to_string(),
            t.adam.beta2.to_string(),
            t.adam.eps.to_string(),
            t.augment.is_some().to_string(),
            aug.flip_prob.to_string(),
            aug.brightness.1.to_string(),
            aug.contrast.0.to_string(),
            aug.contrast.1.to_string(),
        ];
        for (k, v) in TRAINING_KEYS.iter().zip(training) {
            if !t.augment.is_some() && matches!(*k, "flip_prob" | "brightness" | "contrast_min" | "contrast_max") {
                continue;
            }
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
