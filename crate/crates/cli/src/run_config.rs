//! The flat TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use usgan::data::SplitMode;
use usgan::model::ModelConfig;
use usgan::objectives::LossWeights;
use usgan::training::TrainConfig;

/// Every knob of a training run. Unknown keys are rejected; absent keys take
/// the defaults listed in [`TEMPLATE`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub manifest: Option<PathBuf>,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub split_mode: SplitMode,
    pub out: Option<PathBuf>,

    pub image_size: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub num_residual_blocks: usize,
    pub use_ultimate_skip: bool,
    pub critic_layers: usize,

    pub lambda_cls: f64,
    pub lambda_rec: f64,
    pub lambda_gp: f64,

    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub n_critic: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub max_steps: u64,
    pub lr_decay_from_epoch: Option<u64>,
    pub horizontal_flip: bool,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            manifest: None,
            train_fraction: 0.9,
            split_seed: 0,
            split_mode: SplitMode::Record,
            out: None,
            image_size: t.model.image_size,
            num_classes: t.model.num_classes,
            base_channels: t.model.base_channels,
            num_residual_blocks: t.model.num_residual_blocks,
            use_ultimate_skip: t.model.use_ultimate_skip,
            critic_layers: t.model.critic_layers,
            lambda_cls: t.weights.lambda_cls,
            lambda_rec: t.weights.lambda_rec,
            lambda_gp: t.weights.lambda_gp,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            batch_size: t.batch_size,
            epochs: t.epochs,
            n_critic: t.n_critic,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
            max_steps: t.max_steps,
            lr_decay_from_epoch: t.lr_decay_from_epoch,
            horizontal_flip: t.horizontal_flip,
        }
    }
}

/// Documented defaults, as printed by `usgan default-config`.
pub const TEMPLATE: &str = r#"# usgan run configuration. Every key is optional; the values below are the defaults.
# Relative paths are resolved against this file's directory.

# Dataset manifest (required for `train`).
# manifest = "corpus/manifest.csv"
# Fraction of records used for training; the rest is written out as the test split.
train_fraction = 0.9
split_seed = 0
# "record" shuffles images; "subject-disjoint" keeps each subject on one side.
split_mode = "record"
# Run directory (may also be given with --out).
# out = "runs/example"

# Architecture.
image_size = 128
num_classes = 7
base_channels = 64
num_residual_blocks = 1
use_ultimate_skip = true
# Stride-2 critic layers; image_size must be a multiple of 2^critic_layers.
critic_layers = 6

# Loss weights: classification, cycle reconstruction, gradient penalty.
lambda_cls = 1.0
lambda_rec = 10.0
lambda_gp = 10.0

# Optimization.
learning_rate = 0.0001
beta1 = 0.5
beta2 = 0.999
batch_size = 8
epochs = 350
# Critic updates per generator update.
n_critic = 5
seed = 0
# Checkpoint and log intervals in steps (0 disables).
checkpoint_every = 1000
log_every = 10
# Stop after this many steps (0 = run all epochs).
max_steps = 0
# Decay the learning rate linearly to zero from this epoch (unset = constant).
# lr_decay_from_epoch = 300
# Random left-right mirroring of training images.
horizontal_flip = false
"#;

impl RunConfigFile {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Parse `path`, returning the config and the file's exact text. Relative
    /// `manifest` and `out` paths are made relative to the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<(Self, String)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok((cfg, text))
    }

    pub fn train_config(&self) -> anyhow::Result<TrainConfig> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            bail!("train_fraction must be in (0, 1], got {}", self.train_fraction);
        }
        let cfg = TrainConfig {
            model: ModelConfig {
                image_size: self.image_size,
                num_classes: self.num_classes,
                base_channels: self.base_channels,
                num_residual_blocks: self.num_residual_blocks,
                use_ultimate_skip: self.use_ultimate_skip,
                critic_layers: self.critic_layers,
            },
            weights: LossWeights { lambda_cls: self.lambda_cls, lambda_rec: self.lambda_rec, lambda_gp: self.lambda_gp },
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            batch_size: self.batch_size,
            epochs: self.epochs,
            n_critic: self.n_critic,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
            max_steps: self.max_steps,
            lr_decay_from_epoch: self.lr_decay_from_epoch,
            horizontal_flip: self.horizontal_flip,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
