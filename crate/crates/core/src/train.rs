//! Minibatch Adam training of the history-aware detector.
//!
//! Every random draw in an epoch is derived from `(seed, epoch, index)`, so a
//! run resumed from a checkpoint replays exactly what an uninterrupted run
//! would have done.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{loss_and_grads, Detector, DetectorConfig};
use crate::iterdet::make_training_example;
use crate::nn::{adam_step, AdamConfig, Checkpoint, OptimizerState, Tensor};
use crate::synthetic::SceneSample;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            seed: 0,
            lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train: lr must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainingMeta {
    epochs_completed: u32,
    config: TrainConfig,
}

fn epoch_rng(seed: u64, epoch: u32, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&epoch.to_le_bytes());
    key[12..20].copy_from_slice(&index.to_le_bytes());
    key[20..28].copy_from_slice(b"trainstp");
    ChaCha8Rng::from_seed(key)
}

/// Detector weights plus optimizer state and progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub detector: Detector,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub epochs_completed: u32,
}

impl Trainer {
    pub fn new(detector_config: DetectorConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let detector = Detector::new(detector_config)?;
        let optimizer = OptimizerState::new(config.adam(), detector.params.tensors());
        Ok(Trainer {
            detector,
            optimizer,
            config,
            epochs_completed: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.detector.to_checkpoint();
        ckpt.optimizer = Some(self.optimizer.clone());
        ckpt.training = serde_json::to_value(TrainingMeta {
            epochs_completed: self.epochs_completed,
            config: self.config.clone(),
        })
        .expect("metadata serializes");
        ckpt
    }

    /// Restores a trainer; `config` replaces the stored schedule but the
    /// optimizer moments and step count are kept.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let detector = Detector::from_checkpoint(ckpt)?;
        let meta: TrainingMeta = serde_json::from_value(ckpt.training.clone())
            .map_err(|e| Error::Config(format!("checkpoint has no training state: {e}")))?;
        let config = config.unwrap_or(meta.config);
        config.validate()?;
        let mut optimizer = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        optimizer.config = config.adam();
        let shapes_ok = optimizer.first.len() == detector.params.tensors().len()
            && optimizer.first.iter().zip(detector.params.tensors()).all(|(m, p)| m.shape() == p.shape());
        if !shapes_ok {
            return Err(Error::Config("optimizer state does not match parameters".into()));
        }
        Ok(Trainer {
            detector,
            optimizer,
            config,
            epochs_completed: meta.epochs_completed,
        })
    }

    /// One optimizer step over `batch`; returns the mean loss before the step.
    pub fn step(&mut self, batch: &[(&SceneSample, ChaCha8Rng)]) -> Result<f64> {
        let mut total = 0.0;
        let mut grads = self.detector.params.zeros_like();
        for (scene, rng) in batch {
            let mut rng = rng.clone();
            let ex = make_training_example(scene, &mut rng)?;
            let (loss, g) = loss_and_grads(&ex.image, &ex.history, &ex.targets, &self.detector.params, &self.detector.config)?;
            total += loss;
            grads.add_assign(&g)?;
        }
        let n = batch.len().max(1) as f64;
        grads.scale(1.0 / n);
        let names = self.detector.params.names();
        let grad_tensors: Vec<Tensor> = grads.tensors().into_iter().cloned().collect();
        let mut params = self.detector.params.tensors_mut();
        adam_step(&mut params, &grad_tensors, &mut self.optimizer).map_err(|e| match e {
            Error::NonFinite(what) => {
                let idx = what.rsplit(' ').next().and_then(|i| i.parse::<usize>().ok());
                Error::NonFinite(idx.and_then(|i| names.get(i).cloned()).map_or(what, |n| format!("gradient of {n}")))
            }
            other => other,
        })?;
        Ok(total / n)
    }

    /// Runs the next epoch over `scenes` and returns its mean training loss.
    pub fn train_epoch(&mut self, scenes: &[SceneSample]) -> Result<f64> {
        if scenes.is_empty() {
            return Err(Error::Config("no training scenes".into()));
        }
        let epoch = self.epochs_completed;
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut epoch_rng(self.config.seed, epoch, u64::MAX));
        let mut sum = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<(&SceneSample, ChaCha8Rng)> = chunk
                .iter()
                .map(|&i| (&scenes[i], epoch_rng(self.config.seed, epoch, i as u64)))
                .collect();
            let loss = self.step(&batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss in epoch {}", epoch + 1)));
            }
            sum += loss * chunk.len() as f64;
        }
        self.epochs_completed += 1;
        Ok(sum / scenes.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_range, SceneSpec};

    fn tiny() -> (DetectorConfig, TrainConfig, Vec<SceneSample>) {
        let det = DetectorConfig { stem_channels: 4, trunk_depth: 1, ..Default::default() };
        let train = TrainConfig { epochs: 2, batch_size: 4, seed: 3, lr: 1e-3 };
        let spec = SceneSpec { image_size: 32, object_size_max: 12, objects_max: 6, ..Default::default() };
        (det, train, generate_range(&spec, 1, 0, 8))
    }

    #[test]
    fn resume_replays_the_next_epoch() {
        let (det, cfg, scenes) = tiny();
        let mut a = Trainer::new(det, cfg).unwrap();
        a.train_epoch(&scenes).unwrap();
        let mut b = Trainer::from_checkpoint(&a.to_checkpoint(), None).unwrap();
        assert_eq!(b, a);
        let la = a.train_epoch(&scenes).unwrap();
        let lb = b.train_epoch(&scenes).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.detector, b.detector);
    }

    #[test]
    fn checkpoint_without_training_state_is_rejected() {
        let (det, _, _) = tiny();
        let plain = Detector::new(det).unwrap().to_checkpoint();
        assert!(Trainer::from_checkpoint(&plain, None).is_err());
    }
}
