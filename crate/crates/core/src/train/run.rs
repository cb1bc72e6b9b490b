//! The training loop and its on-disk run directory.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{joint_loss, learning_rate, Adam, LossReport, TrainConfig};
use crate::dataset::PackedSequence;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{write_checkpoint, Model};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f32,
    #[serde(flatten)]
    pub loss: LossReport<f32>,
    pub total: f32,
}

pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: Adam,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            optimizer: Adam::new(&model.config),
            model,
            config,
        })
    }

    /// Seed for the masked-token selection of a given step.
    fn mlm_seed(&self, step: u64) -> u64 {
        self.config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(step)
    }

    /// One optimizer update on `batch`. `batch_ids` identify the samples in
    /// error messages.
    pub fn train_step(&mut self, batch: &[PackedSequence], batch_ids: &[usize]) -> Result<StepMetrics> {
        let step = self.optimizer.step() + 1;
        let (loss, grads) = joint_loss(
            &self.model,
            batch,
            self.config.tasks,
            self.config.mlm_mask_rate,
            self.mlm_seed(step),
        )
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m} at step {step}, batch ids {batch_ids:?}")),
            other => other,
        })?;
        let total = loss.total();
        if !total.is_finite() || !grads.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss:?} at step {step}, batch ids {batch_ids:?}"
            )));
        }
        let lr = learning_rate(self.config.learning_rate, self.config.warmup_steps, step);
        self.optimizer.update(&mut self.model.params, &grads, lr);
        Ok(StepMetrics { step, lr, loss, total })
    }

    /// Trains until `max_steps` updates have been applied, cycling through
    /// `data` in epochs. `data` holds swap units at positions `2k, 2k+1`;
    /// each epoch shuffles whole units so batches keep that layout.
    pub fn fit(&mut self, data: &[PackedSequence], mut run: Option<&mut TrainingRun>) -> Result<Vec<StepMetrics>> {
        if data.is_empty() || data.len() % 2 != 0 {
            return Err(Error::Contract(format!(
                "training data must be a non-empty list of swap units, got {} samples",
                data.len()
            )));
        }
        let units_per_batch = self.config.batch_size / 2;
        let mut order: Vec<usize> = (0..data.len() / 2).collect();
        let mut history = Vec::new();
        let mut epoch = 0u64;
        while self.optimizer.step() < self.config.max_steps {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(epoch));
            order.sort_unstable();
            order.shuffle(&mut rng);
            for chunk in order.chunks(units_per_batch) {
                if self.optimizer.step() >= self.config.max_steps {
                    break;
                }
                let ids: Vec<usize> = chunk.iter().flat_map(|&u| [2 * u, 2 * u + 1]).collect();
                let batch: Vec<PackedSequence> = ids.iter().map(|&i| data[i].clone()).collect();
                let metrics = self.train_step(&batch, &ids)?;
                log::debug!("step {} loss {}", metrics.step, metrics.total);
                if let Some(run) = run.as_deref_mut() {
                    run.log(&metrics)?;
                    let every = self.config.checkpoint_every;
                    if every > 0 && metrics.step % every == 0 {
                        run.checkpoint(metrics.step, &self.model)?;
                    }
                }
                history.push(metrics);
            }
            epoch += 1;
        }
        if let Some(run) = run {
            run.finish(&self.model)?;
        }
        Ok(history)
    }
}

/// A run directory: `config.json`, `metrics.jsonl`,
/// `checkpoint-{step}.bin` and the final `model.bin`.
pub struct TrainingRun {
    dir: PathBuf,
    metrics: File,
}

impl TrainingRun {
    pub fn create<C: Serialize>(dir: &Path, config: &C) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let snapshot = serde_json::to_string_pretty(config)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        write_atomic(&dir.join("config.json"), |w| writeln!(w, "{snapshot}"))?;
        let path = dir.join("metrics.jsonl");
        let metrics = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(TrainingRun {
            dir: dir.to_path_buf(),
            metrics,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn model_path(&self) -> PathBuf {
        self.dir.join("model.bin")
    }

    pub fn log(&mut self, metrics: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(metrics).expect("metrics serialize");
        let path = self.dir.join("metrics.jsonl");
        writeln!(self.metrics, "{line}")
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(&path, e))
    }

    pub fn checkpoint(&self, step: u64, model: &Model<f32>) -> Result<()> {
        write_checkpoint(&self.dir.join(format!("checkpoint-{step}.bin")), model)
    }

    pub fn finish(&self, model: &Model<f32>) -> Result<()> {
        write_checkpoint(&self.model_path(), model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::pack_pair_ids;
    use crate::model::ModelConfig;
    use crate::train::TaskSet;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            intermediate: 16,
            max_seq_len: 16,
            vocab_size: 20,
        }
    }

    fn data() -> Vec<PackedSequence> {
        let mut out = Vec::new();
        for k in 0..4u32 {
            let a = [5 + k, 6 + k, 7];
            let b = [9 + k, 10, 11 + k];
            out.push(pack_pair_ids(&a, &b, 16).unwrap());
            out.push(pack_pair_ids(&b, &a, 16).unwrap());
        }
        out
    }

    fn config(steps: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            learning_rate: 1e-2,
            warmup_steps: 2,
            max_steps: steps,
            seed: 7,
            tasks: TaskSet { alg: true, sfp: true, mlm: true },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_on_tiny_data() {
        let model = Model::init(tiny(), 1).unwrap();
        let mut t = Trainer::new(model, config(60)).unwrap();
        let h = t.fit(&data(), None).unwrap();
        assert_eq!(h.len(), 60);
        assert_eq!(h[0].lr, 5e-3);
        let first: f32 = h[..4].iter().map(|m| m.loss.alg.unwrap()).sum();
        let last: f32 = h[56..].iter().map(|m| m.loss.alg.unwrap()).sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn run_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(4);
        cfg.checkpoint_every = 2;
        let mut run = TrainingRun::create(dir.path(), &cfg).unwrap();
        let mut t = Trainer::new(Model::init(tiny(), 1).unwrap(), cfg).unwrap();
        t.fit(&data(), Some(&mut run)).unwrap();
        for f in ["config.json", "metrics.jsonl", "checkpoint-2.bin", "checkpoint-4.bin", "model.bin"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let lines: Vec<StepMetrics> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.iter().map(|m| m.step).collect::<Vec<_>>(), [1, 2, 3, 4]);
    }

    #[test]
    fn odd_data_is_rejected() {
        let mut t = Trainer::new(Model::init(tiny(), 1).unwrap(), config(1)).unwrap();
        assert!(t.fit(&data()[..3], None).is_err());
    }
}
