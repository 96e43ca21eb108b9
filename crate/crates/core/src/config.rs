//! Run configuration.
//!
//! Configs are JSON objects; every field is optional and falls back to the
//! desk-scale defaults below. Unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataflow::BlobParams;
use crate::encoder::OptimizerState;
use crate::error::{Error, Result};
use crate::geometry::{Generator, MheParams};
use crate::losses::{
    LossConfig, MarginMode, DEFAULT_FEAT_WEIGHT_BASE, DEFAULT_FIXED_MARGIN, DEFAULT_TEMPERATURE,
};
use crate::memory::MemoryStrategy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    UniformPrototype,
    CosineClassifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginSetting {
    None,
    Fixed,
    Dynamic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs(BlobParams),
    Idx(IdxPaths),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    FixedTotal,
    FixedPerClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub strategy: MemoryKind,
    /// Total capacity for `fixed_total`, per-class count for `fixed_per_class`.
    pub size: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            strategy: MemoryKind::FixedTotal,
            size: 80,
        }
    }
}

impl MemoryConfig {
    pub fn strategy(&self) -> MemoryStrategy {
        match self.strategy {
            MemoryKind::FixedTotal => MemoryStrategy::FixedTotal {
                capacity: self.size,
            },
            MemoryKind::FixedPerClass => MemoryStrategy::FixedPerClass {
                per_class: self.size,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones_base: Vec<usize>,
    pub milestones_increment: Vec<usize>,
    pub gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0002,
            milestones_base: vec![18, 36, 51],
            milestones_increment: vec![19, 28, 35],
            gamma: 0.1,
        }
    }
}

impl OptimizerConfig {
    /// Fresh optimizer for task `t` (base milestones at t = 0).
    pub fn build(&self, task: usize) -> Result<OptimizerState> {
        let milestones = if task == 0 {
            self.milestones_base.clone()
        } else {
            self.milestones_increment.clone()
        };
        OptimizerState::new(
            self.lr,
            self.momentum,
            self.weight_decay,
            milestones,
            self.gamma,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpochConfig {
    pub base: usize,
    pub increment: usize,
}

impl Default for EpochConfig {
    fn default() -> Self {
        Self {
            base: 60,
            increment: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub tasks: usize,
    pub class_order_seed: u64,
    pub run_seed: u64,
    pub head: Head,
    pub margin_mode: MarginSetting,
    /// Margin used when `margin_mode` is `fixed`.
    pub fixed_margin: f64,
    pub generator: Generator,
    pub mhe: MheParams,
    pub tau: f64,
    pub feat_weight_base: f64,
    pub ema_factor: f64,
    /// Consecutive identical end-of-epoch assignments that freeze the task's assignment.
    pub assign_window: usize,
    pub memory: MemoryConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: EpochConfig,
    pub batch_size: usize,
    /// Encoder widths after the input layer; the last entry is the feature dimension.
    pub layer_sizes: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::Blobs(BlobParams::default()),
            tasks: 4,
            class_order_seed: 0,
            run_seed: 0,
            head: Head::UniformPrototype,
            margin_mode: MarginSetting::Dynamic,
            fixed_margin: DEFAULT_FIXED_MARGIN,
            generator: Generator::GramSchmidt,
            mhe: MheParams::default(),
            tau: DEFAULT_TEMPERATURE,
            feat_weight_base: DEFAULT_FEAT_WEIGHT_BASE,
            ema_factor: crate::assignment::DEFAULT_EMA_FACTOR,
            assign_window: 3,
            memory: MemoryConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: EpochConfig::default(),
            batch_size: 64,
            layer_sizes: vec![64, 64, 32],
        }
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Pulls the offending key out of a serde message such as "unknown field `taus`, ...".
fn key_from_serde(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<root>".to_string())
}

impl RunConfig {
    /// Parses a JSON object over the defaults; an empty document yields the defaults.
    pub fn from_json_str(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            config_err(&key_from_serde(&msg), msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(config_err("tasks", "must be at least 1"));
        }
        if !(self.tau > 0.0) {
            return Err(config_err("tau", "must be positive"));
        }
        if !(self.fixed_margin >= 0.0) {
            return Err(config_err("fixed_margin", "must be non-negative"));
        }
        if !(self.feat_weight_base >= 0.0) {
            return Err(config_err("feat_weight_base", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.ema_factor) {
            return Err(config_err("ema_factor", "must lie in [0, 1]"));
        }
        if self.assign_window == 0 {
            return Err(config_err("assign_window", "must be at least 1"));
        }
        if self.memory.size == 0 {
            return Err(config_err("memory.size", "must be positive"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(config_err("optimizer.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(config_err("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return Err(config_err("optimizer.weight_decay", "must be non-negative"));
        }
        if !(self.optimizer.gamma > 0.0) {
            return Err(config_err("optimizer.gamma", "must be positive"));
        }
        if self.epochs.base == 0 || self.epochs.increment == 0 {
            return Err(config_err("epochs", "base and increment must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be positive"));
        }
        if self.layer_sizes.is_empty() || self.layer_sizes.contains(&0) {
            return Err(config_err(
                "layer_sizes",
                "need at least one positive width",
            ));
        }
        if self.mhe.iters == 0 || !(self.mhe.step > 0.0) {
            return Err(config_err("mhe", "iters and step must be positive"));
        }
        if let DatasetConfig::Blobs(b) = &self.dataset {
            if b.classes < 2 {
                return Err(config_err(
                    "dataset.blobs.classes",
                    "need at least two classes",
                ));
            }
            if b.input_dim == 0 {
                return Err(config_err("dataset.blobs.input_dim", "must be positive"));
            }
            if b.n_train == 0 || b.n_test == 0 {
                return Err(config_err(
                    "dataset.blobs.n_train",
                    "per-class counts must be positive",
                ));
            }
            if !(b.spread > 0.0) {
                return Err(config_err("dataset.blobs.spread", "must be positive"));
            }
            if b.classes % self.tasks != 0 {
                return Err(config_err(
                    "tasks",
                    format!("must divide {} classes", b.classes),
                ));
            }
            let d = self.feature_dim();
            let capacity = match self.generator {
                Generator::SimplexEtf => d + 1,
                _ => d,
            };
            if self.head == Head::UniformPrototype && b.classes > capacity {
                return Err(config_err(
                    "layer_sizes",
                    format!(
                        "feature dimension {d} is too small for {} prototypes",
                        b.classes
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn margin(&self) -> MarginMode {
        match self.margin_mode {
            MarginSetting::None => MarginMode::None,
            MarginSetting::Fixed => MarginMode::Fixed(self.fixed_margin),
            MarginSetting::Dynamic => MarginMode::Dynamic,
        }
    }

    pub fn loss_config(&self, task_index: usize) -> LossConfig {
        LossConfig {
            temperature: self.tau,
            margin: self.margin(),
            feat_weight_base: self.feat_weight_base,
            task_index,
        }
    }

    /// The `i`-th seed replicate: every seed shifted by `i`.
    pub fn replicate(&self, i: u64) -> Self {
        let mut cfg = self.clone();
        cfg.run_seed = self.run_seed.wrapping_add(i);
        cfg.class_order_seed = self.class_order_seed.wrapping_add(i);
        if let DatasetConfig::Blobs(b) = &mut cfg.dataset {
            b.seed = b.seed.wrapping_add(i);
        }
        cfg
    }
}
