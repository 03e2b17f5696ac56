use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{CheckpointKind, LogRecord, TrainError, TrainObserver, TrainState};

/// Run directory layout:
///
/// ```text
/// <root>/train.log                    one JSON record per line
/// <root>/checkpoints/step_00000100.ckpt
/// <root>/checkpoints/final.ckpt
/// <root>/checkpoints/crash.ckpt
/// ```
pub struct RunDirectory {
    root: PathBuf,
    log: File,
}

impl RunDirectory {
    /// Open (creating if needed) a run directory. The log is appended to, so
    /// a resumed run continues the same file.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, TrainError> {
        let root = root.into();
        fs::create_dir_all(root.join("checkpoints")).map_err(|e| TrainError::io(&root, e))?;
        let log_path = root.join("train.log");
        let log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| TrainError::io(&log_path, e))?;
        Ok(Self { root, log })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("train.log")
    }

    pub fn checkpoint_path(&self, step: u64, kind: CheckpointKind) -> PathBuf {
        let name = match kind {
            CheckpointKind::Periodic => format!("step_{step:08}.ckpt"),
            CheckpointKind::Final => "final.ckpt".to_string(),
            CheckpointKind::Crash => "crash.ckpt".to_string(),
        };
        self.root.join("checkpoints").join(name)
    }

    /// Most recent periodic checkpoint, by step number.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>, TrainError> {
        let dir = self.root.join("checkpoints");
        let entries = fs::read_dir(&dir).map_err(|e| TrainError::io(&dir, e))?;
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in entries {
            let path = entry.map_err(|e| TrainError::io(&dir, e))?.path();
            let step = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step_")?.strip_suffix(".ckpt")?.parse::<u64>().ok());
            if let Some(step) = step {
                if best.as_ref().is_none_or(|(s, _)| step > *s) {
                    best = Some((step, path));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }
}

impl TrainObserver for RunDirectory {
    fn on_log(&mut self, record: &LogRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(record).expect("log records serialize");
        let path = self.log_path();
        writeln!(self.log, "{line}").map_err(|e| TrainError::io(&path, e))
    }

    fn on_checkpoint(&mut self, state: &TrainState, kind: CheckpointKind) -> Result<(), TrainError> {
        state.save(&self.checkpoint_path(state.step, kind))
    }
}
