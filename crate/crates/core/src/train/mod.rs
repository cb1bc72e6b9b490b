//! Training objectives, optimizer and the training loop.

mod losses;
mod optim;
mod run;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use losses::{
    joint_loss, loss_alg, loss_alg_sfp, loss_mlm, loss_sfp, mask_count, select_mlm_positions,
    sfp_loss_from_embeddings, LossReport,
};
pub use optim::{learning_rate, Adam};
pub use run::{StepMetrics, Trainer, TrainingRun};

/// Which objectives contribute to the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSet {
    pub alg: bool,
    pub sfp: bool,
    pub mlm: bool,
}

impl Default for TaskSet {
    fn default() -> Self {
        TaskSet {
            alg: true,
            sfp: true,
            mlm: false,
        }
    }
}

impl TaskSet {
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut t = TaskSet {
            alg: false,
            sfp: false,
            mlm: false,
        };
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "alg" => t.alg = true,
                "sfp" => t.sfp = true,
                "mlm" => t.mlm = true,
                other => return Err(Error::Config(format!("unknown task {other:?}"))),
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub seed: u64,
    pub tasks: TaskSet,
    pub mlm_mask_rate: f64,
    /// Write a checkpoint every this many steps (0 disables periodic ones).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 5e-5,
            warmup_steps: 4,
            max_steps: 1000,
            seed: 0,
            tasks: TaskSet::default(),
            mlm_mask_rate: 0.15,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tasks.alg || self.tasks.sfp || self.tasks.mlm) {
            return Err(Error::Config("no training task enabled".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be even so each pair sits next to its swap, got {}",
                self.batch_size
            )));
        }
        if self.tasks.sfp && self.batch_size < 2 {
            return Err(Error::Config("similarity task needs batch_size >= 2".into()));
        }
        if !(self.mlm_mask_rate > 0.0 && self.mlm_mask_rate < 1.0) {
            return Err(Error::Config(format!(
                "mlm_mask_rate must lie in (0, 1), got {}",
                self.mlm_mask_rate
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}
