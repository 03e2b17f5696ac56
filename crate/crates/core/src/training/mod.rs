//! Alternating critic/generator optimization, checkpoints and run logging.
//!
//! One training step consumes one batch: `n_critic` critic updates, then one
//! generator update on the same images. Each epoch visits the dataset in a
//! seeded order and drops the trailing partial batch. Everything runs on the
//! calling thread, so a seed fixes the whole trajectory.

mod checkpoint;
mod config;
mod optim;
mod run_dir;
mod steps;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::model::{build_discriminator, build_generator, DiscriminatorParams, GeneratorParams, ModelError};
use crate::objectives::{LossReport, Phase};

pub use checkpoint::{CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC};
pub use config::TrainConfig;
pub use optim::{Adam, ADAM_EPSILON};
pub use run_dir::RunDirectory;
pub use steps::{
    critic_evaluation, cycle_reconstruct, generator_evaluation, sample_target_labels, train_step_critic,
    train_step_generator, Evaluation,
};

/// XOR-ed into the run seed to derive the critic's initialization seed.
pub const CRITIC_SEED_MIX: u64 = 0x5bd1_e995;
/// Stream of the run seed reserved for per-step draws (targets, interpolation).
const STEP_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged in the {phase:?} update: {detail}")]
    Diverged { phase: Phase, detail: String },
    #[error("{}: {detail}", .path.display())]
    Io { path: PathBuf, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl TrainError {
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        TrainError::Io { path: path.to_path_buf(), detail: err.to_string() }
    }
}

/// Everything a run needs to continue: the persisted checkpoint content.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub g_opt: Adam,
    pub d_opt: Adam,
    /// Completed training steps.
    pub step: u64,
    pub epoch: u64,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: u64,
    /// Source of target permutations and interpolation weights.
    pub rng: ChaCha8Rng,
}

/// The persisted form of a [`TrainState`].
pub type Checkpoint = TrainState;

impl TrainState {
    /// Fresh parameters and optimizer state for `config`.
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let generator = build_generator(&config.model, config.seed)?;
        let discriminator = build_discriminator(&config.model, config.seed ^ CRITIC_SEED_MIX)?;
        let g_opt = Adam::new(generator.params(), config.beta1, config.beta2);
        let d_opt = Adam::new(discriminator.params(), config.beta1, config.beta2);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STEP_STREAM);
        Ok(Self { config, generator, discriminator, g_opt, d_opt, step: 0, epoch: 0, batch_in_epoch: 0, rng })
    }

    fn finished(&self) -> bool {
        self.epoch >= self.config.epochs || (self.config.max_steps > 0 && self.step >= self.config.max_steps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Periodic,
    Final,
    /// Written just before a divergence error is returned; holds the last
    /// finite state.
    Crash,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    /// Seconds since the run (or resumption) started.
    pub wall_time: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Receives progress from [`train`]. Both hooks default to doing nothing.
pub trait TrainObserver {
    fn on_log(&mut self, _record: &LogRecord) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState, _kind: CheckpointKind) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Per-image mirroring decisions for the batch of `step`. Drawn from a
/// stream counted down from the top so it never meets the shuffle streams,
/// and kept out of the checkpointed generator so toggling the knob leaves
/// target sampling unchanged.
fn flip_mask(seed: u64, step: u64, n: usize) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - step);
    (0..n).map(|_| rng.random_bool(0.5)).collect()
}

/// Train from scratch under `config`.
pub fn train(config: TrainConfig, dataset: &Dataset, observer: &mut dyn TrainObserver) -> Result<Checkpoint, TrainError> {
    resume(TrainState::new(config)?, dataset, observer)
}

/// Continue a run from `state` until its epochs (or step cap) are exhausted.
pub fn resume(
    mut state: TrainState,
    dataset: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<Checkpoint, TrainError> {
    state.config.validate()?;
    let cfg = state.config.clone();
    if dataset.image_size() != cfg.model.image_size || dataset.num_classes() != cfg.model.num_classes {
        return Err(TrainError::Config(format!(
            "dataset has {}px images over {} classes, model expects {}px over {}",
            dataset.image_size(),
            dataset.num_classes(),
            cfg.model.image_size,
            cfg.model.num_classes
        )));
    }
    if !state.finished() && dataset.batches_per_epoch(cfg.batch_size) == 0 {
        return Err(TrainError::Config(format!(
            "dataset of {} images is smaller than batch_size {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    let start = Instant::now();
    while !state.finished() {
        let order = dataset.epoch_batches(cfg.batch_size, cfg.seed, state.epoch);
        let indices = &order[state.batch_in_epoch as usize];
        let batch = if cfg.horizontal_flip {
            dataset.gather_flipped(indices, &flip_mask(cfg.seed, state.step, indices.len()))
        } else {
            dataset.gather(indices)
        };
        let mut rng = state.rng.clone();
        let mut next = state.clone();
        let outcome = (|| {
            let mut critic = None;
            for _ in 0..cfg.n_critic {
                critic = Some(train_step_critic(&mut next, &batch, &mut rng)?);
            }
            let generator = train_step_generator(&mut next, &batch, &mut rng)?;
            Ok::<_, TrainError>((critic.expect("n_critic >= 1"), generator))
        })();
        let (critic, generator) = match outcome {
            Ok(reports) => reports,
            Err(e @ TrainError::Diverged { .. }) => {
                observer.on_checkpoint(&state, CheckpointKind::Crash)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        state = next;
        state.rng = rng;
        state.step += 1;
        state.batch_in_epoch += 1;
        if state.batch_in_epoch as usize == order.len() {
            state.epoch += 1;
            state.batch_in_epoch = 0;
        }
        if cfg.log_every > 0 && state.step % cfg.log_every == 0 {
            let wall_time = start.elapsed().as_secs_f64();
            for report in [critic, generator] {
                observer.on_log(&LogRecord { step: state.step, epoch: state.epoch, wall_time, report })?;
            }
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(&state, CheckpointKind::Periodic)?;
        }
    }
    observer.on_checkpoint(&state, CheckpointKind::Final)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SpriteSpec;
    use crate::model::ModelConfig;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig { image_size: 16, num_classes: 3, base_channels: 2, critic_layers: 3, ..Default::default() },
            batch_size: 2,
            n_critic: 2,
            epochs: 2,
            learning_rate: 1e-3,
            log_every: 1,
            checkpoint_every: 0,
            ..Default::default()
        }
    }

    pub(crate) fn tiny_dataset() -> Dataset {
        Dataset::from_sprites(&SpriteSpec::new(16, 3, 0).unwrap(), 0..2)
    }

    #[derive(Default)]
    struct Recorder {
        logs: Vec<LogRecord>,
        kinds: Vec<(u64, CheckpointKind)>,
    }

    impl TrainObserver for Recorder {
        fn on_log(&mut self, record: &LogRecord) -> Result<(), TrainError> {
            self.logs.push(record.clone());
            Ok(())
        }
        fn on_checkpoint(&mut self, state: &TrainState, kind: CheckpointKind) -> Result<(), TrainError> {
            self.kinds.push((state.step, kind));
            Ok(())
        }
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let cfg = TrainConfig { epochs: 0, ..tiny_config() };
        let out = train(cfg.clone(), &tiny_dataset(), &mut NoObserver).unwrap();
        assert_eq!(out, TrainState::new(cfg).unwrap());
        assert_eq!(out.step, 0);
    }

    #[test]
    fn epoch_loop_counts_steps_and_notifies() {
        let mut rec = Recorder::default();
        let cfg = TrainConfig { checkpoint_every: 2, ..tiny_config() };
        let out = train(cfg, &tiny_dataset(), &mut rec).unwrap();
        // 6 images, batch 2: 3 steps per epoch
        assert_eq!((out.step, out.epoch, out.batch_in_epoch), (6, 2, 0));
        assert_eq!(out.g_opt.t, 6);
        assert_eq!(out.d_opt.t, 12);
        assert_eq!(rec.logs.len(), 12);
        assert_eq!(rec.logs[0].report.phase, Phase::Critic);
        assert_eq!(rec.logs[1].report.phase, Phase::Generator);
        let kinds: Vec<_> = rec.kinds.iter().map(|k| k.1).collect();
        assert_eq!(kinds, [CheckpointKind::Periodic; 3].iter().copied().chain([CheckpointKind::Final]).collect::<Vec<_>>());
    }

    #[test]
    fn step_cap_stops_mid_epoch() {
        let cfg = TrainConfig { max_steps: 4, ..tiny_config() };
        let out = train(cfg, &tiny_dataset(), &mut NoObserver).unwrap();
        assert_eq!((out.step, out.epoch, out.batch_in_epoch), (4, 1, 1));
    }

    #[test]
    fn flip_knob_is_deterministic_and_changes_training() {
        let masks: Vec<Vec<bool>> = (0..50).map(|s| flip_mask(3, s, 8)).collect();
        assert_eq!(masks, (0..50).map(|s| flip_mask(3, s, 8)).collect::<Vec<_>>());
        let flips = masks.concat().iter().filter(|&&f| f).count();
        assert!((150..250).contains(&flips), "{flips} of 400 flipped");

        // Sprites are mirror-symmetric, so use random images to make flips visible.
        let mut data = tiny_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in &mut data.images {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let cfg = TrainConfig { max_steps: 2, horizontal_flip: true, ..tiny_config() };
        let a = train(cfg.clone(), &data, &mut NoObserver).unwrap();
        assert_eq!(a, train(cfg.clone(), &data, &mut NoObserver).unwrap());
        let plain = train(TrainConfig { horizontal_flip: false, ..cfg }, &data, &mut NoObserver).unwrap();
        assert_eq!(a.rng, plain.rng, "the knob must not perturb target sampling");
        assert_ne!(a.generator, plain.generator, "mirrored batches must change the updates");
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let cfg = TrainConfig { max_steps: 2, ..tiny_config() };
        let out = train(cfg, &tiny_dataset(), &mut NoObserver).unwrap();
        let bytes = out.to_bytes();
        let back = TrainState::from_bytes(&bytes).unwrap();
        assert_eq!(back, out);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_rejects_version_and_layout_mismatch() {
        let state = TrainState::new(tiny_config()).unwrap();
        let mut bytes = state.to_bytes();
        bytes[8] = 9;
        assert!(TrainState::from_bytes(&bytes).unwrap_err().to_string().contains("version 9"));

        let mut other = TrainState::new(tiny_config()).unwrap();
        other.config.model.num_residual_blocks = 2;
        assert!(TrainState::from_bytes(&other.to_bytes()).is_err());
        assert!(TrainState::from_bytes(&state.to_bytes()[..40]).is_err());
    }

    #[test]
    fn mismatched_or_undersized_dataset_is_rejected() {
        let small = Dataset::from_sprites(&SpriteSpec::new(16, 3, 0).unwrap(), 0..1);
        let cfg = TrainConfig { batch_size: 4, ..tiny_config() };
        assert!(matches!(train(cfg, &small, &mut NoObserver), Err(TrainError::Config(_))));
        let wrong = Dataset::from_sprites(&SpriteSpec::new(32, 3, 0).unwrap(), 0..2);
        assert!(matches!(train(tiny_config(), &wrong, &mut NoObserver), Err(TrainError::Config(_))));
    }

    #[test]
    fn divergence_writes_a_crash_checkpoint_of_the_last_finite_state() {
        let cfg = TrainConfig { learning_rate: 1e300, ..tiny_config() };
        let mut rec = Recorder::default();
        let err = train(cfg, &tiny_dataset(), &mut rec).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
        let (step, kind) = *rec.kinds.last().unwrap();
        assert_eq!(kind, CheckpointKind::Crash);
        assert_eq!(rec.logs.len() as u64, 2 * step);
    }
}
