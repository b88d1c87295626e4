//! Run configuration and its layering.
//!
//! Built-in defaults are overlaid by an optional TOML file, which is then
//! overlaid by `dotted.key=value` overrides. Every key in the file or an
//! override must already exist in the defaults, so typos are rejected
//! with the offending path.

use std::fmt;
use std::path::Path;

use dasg_core::model::ModelConfig;
use dasg_core::tasks::TaskConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

/// Problems with user-supplied configuration. Always a validation failure.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("cannot parse config file {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("malformed override `{0}`: expected key=value")]
    MalformedOverride(String),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    /// Adam with bias correction.
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Momentum coefficient, also Adam's first-moment decay.
    pub momentum: f64,
    /// Adam's second-moment decay.
    pub beta2: f64,
    pub train_size: usize,
    pub test_size: usize,
    /// Abort when a batch loss exceeds this.
    pub divergence_limit: f64,
    /// Decay of the running reward baseline for REINFORCE.
    pub baseline_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 16,
            optimizer: OptimizerKind::Sgd,
            lr: 1e-2,
            momentum: 0.9,
            beta2: 0.999,
            train_size: 2000,
            test_size: 500,
            divergence_limit: 1e3,
            baseline_decay: 0.9,
        }
    }
}

/// How the activation sweep reads its threshold grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdGrid {
    /// Grid values are thresholds.
    Absolute,
    /// Grid values are quantiles of the pretrained model's complexity
    /// scores on the test split.
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Number of seeds, starting at the run seed.
    pub seeds: usize,
    /// Group counts for the group sweep.
    pub groups: Vec<usize>,
    /// Deep-tier thresholds for the activation sweep.
    pub theta_d: Vec<f64>,
    /// `θ_s = ratio · θ_d` in the activation sweep, applied to the grid
    /// value before any quantile lookup.
    pub theta_s_ratio: f64,
    pub theta_grid: ThresholdGrid,
    /// Freeze the attention trunk, not only the evaluator, while finetuning
    /// each threshold of the activation sweep.
    pub freeze_trunk: bool,
    /// Seeds of the activation sweep, starting at the run seed.
    pub sweep_seeds: usize,
    /// Epochs of the shared pretraining run of the activation sweep.
    pub pretrain_epochs: usize,
    /// Epochs of each per-threshold finetune of the activation sweep.
    pub finetune_epochs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            groups: vec![1, 2, 4, 8, 16],
            theta_d: vec![0.001, 0.25, 0.5, 0.75, 0.9, 0.999],
            theta_s_ratio: 0.99,
            theta_grid: ThresholdGrid::Quantile,
            freeze_trunk: true,
            sweep_seeds: 3,
            pretrain_epochs: 4,
            finetune_epochs: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCase {
    pub seq_len: usize,
    pub groups: usize,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub cases: Vec<BenchCase>,
    pub model_dim: usize,
    pub num_heads: usize,
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let case = |seq_len, groups, window| BenchCase { seq_len, groups, window };
        Self {
            cases: vec![case(256, 4, 9), case(1024, 16, 9), case(1024, 16, 33), case(1024, 4, 9)],
            model_dim: 32,
            num_heads: 4,
            repetitions: 20,
            warmup: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; model initialisation, data and shuffling derive from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides`; validated.
    pub fn layered(file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut tree = Value::try_from(RunConfig::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            let layer: Value = toml::from_str(&text).map_err(|e| ConfigError::Parse {
                path: path.display().to_string(),
                reason: e.message().to_string(),
            })?;
            merge(&mut tree, layer, "")?;
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let mut cfg = RunConfig::deserialize(tree).map_err(|e| invalid("config", e.message().to_string()))?;
        if cfg.model.seed != 0 && cfg.model.seed != cfg.seed {
            return Err(invalid("model.seed", "follows `seed`; set `seed` instead"));
        }
        cfg.model.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        if self.task.seq_len != self.model.gmha.seq_len {
            return Err(invalid("task.seq_len", "must equal model.gmha.seq_len"));
        }
        if self.task.dim != self.model.gmha.model_dim {
            return Err(invalid("task.dim", "must equal model.gmha.model_dim"));
        }
        dasg_core::tasks::Task::new(self.task).map_err(|e| invalid("task", e.to_string()))?;
        let t = &self.train;
        if t.epochs == 0 {
            return Err(invalid("train.epochs", "must be at least 1"));
        }
        if t.batch_size == 0 || t.train_size == 0 || t.test_size == 0 {
            return Err(invalid("train", "batch_size, train_size and test_size must be positive"));
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(invalid("train.lr", "must be positive"));
        }
        for (name, v) in [("train.momentum", t.momentum), ("train.beta2", t.beta2), ("train.baseline_decay", t.baseline_decay)] {
            if !(0.0..1.0).contains(&v) {
                return Err(invalid(name, "must be in [0, 1)"));
            }
        }
        if !(t.divergence_limit.is_finite() && t.divergence_limit > 0.0) {
            return Err(invalid("train.divergence_limit", "must be positive"));
        }
        let a = &self.ablation;
        if a.seeds == 0 || a.sweep_seeds == 0 {
            return Err(invalid("ablation", "seeds and sweep_seeds must be at least 1"));
        }
        for &g in &a.groups {
            if g == 0 || self.model.gmha.seq_len % g != 0 {
                return Err(invalid("ablation.groups", format!("{g} does not divide seq_len {}", self.model.gmha.seq_len)));
            }
        }
        for &th in &a.theta_d {
            if !(th > 0.0 && th < 1.0) {
                return Err(invalid("ablation.theta_d", format!("{th} is not in (0, 1)")));
            }
        }
        if !(a.theta_s_ratio > 0.0 && a.theta_s_ratio < 1.0) {
            return Err(invalid("ablation.theta_s_ratio", "must be in (0, 1)"));
        }
        let b = &self.bench;
        if b.repetitions == 0 {
            return Err(invalid("bench.repetitions", "must be at least 1"));
        }
        for c in &b.cases {
            let g = dasg_core::gmha::GmhaConfig {
                seq_len: c.seq_len,
                model_dim: b.model_dim,
                num_heads: b.num_heads,
                num_groups: c.groups,
                window: c.window,
                ff_dim: 1,
            };
            g.validate().map_err(|e| invalid("bench.cases", e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Overlays `layer` onto `base`; tables merge key by key, anything else
/// replaces. Keys absent from `base` are unknown.
fn merge(base: &mut Value, layer: Value, path: &str) -> Result<(), ConfigError> {
    match (base, layer) {
        (Value::Table(b), Value::Table(l)) => {
            for (k, v) in l {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(ConfigError::UnknownKey(sub)),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    let raw = raw.trim();
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override.
pub fn apply_override(tree: &mut Value, text: &str) -> Result<(), ConfigError> {
    let (key, raw) = text.split_once('=').ok_or_else(|| ConfigError::MalformedOverride(text.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::MalformedOverride(text.to_string()));
    }
    let mut slot = &mut *tree;
    for part in key.split('.') {
        slot = match slot {
            Value::Table(t) => t.get_mut(part).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        };
    }
    *slot = parse_scalar(raw);
    Ok(())
}
