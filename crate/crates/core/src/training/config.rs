use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ModelConfig;
use crate::objectives::LossWeights;

/// Optimizer, loss-weight, schedule and ablation settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Critic updates per generator update.
    pub n_critic: usize,
    pub seed: u64,
    /// Periodic checkpoint interval in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Log interval in steps; 0 disables logging.
    pub log_every: u64,
    /// Stop after this many steps even if epochs remain; 0 means no cap.
    pub max_steps: u64,
    /// Epoch from which the learning rate decays linearly to zero at `epochs`.
    /// `None` keeps it constant.
    pub lr_decay_from_epoch: Option<u64>,
    /// Mirror each training image left-right with probability one half.
    pub horizontal_flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 8,
            epochs: 350,
            n_critic: 5,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 10,
            max_steps: 0,
            lr_decay_from_epoch: None,
            horizontal_flip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.weights.validate().map_err(TrainError::Config)?;
        let fail = |msg: String| Err(TrainError::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if self.n_critic < 1 {
            return fail("n_critic must be at least 1".into());
        }
        if let Some(e) = self.lr_decay_from_epoch {
            if e >= self.epochs && self.epochs > 0 {
                return fail(format!("lr_decay_from_epoch {e} must be below epochs {}", self.epochs));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn learning_rate_at(&self, epoch: u64) -> f64 {
        match self.lr_decay_from_epoch {
            Some(start) if epoch >= start => {
                let span = (self.epochs - start) as f64;
                self.learning_rate * (self.epochs.saturating_sub(epoch) as f64 / span)
            }
            _ => self.learning_rate,
        }
    }
}
