//! Training loop, fine-tuning and per-epoch metrics.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::Config;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::{Model, MultiTaskLoss};
use crate::tensor::sgd_momentum_step;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based count of completed epochs.
    pub epoch: u64,
    pub momentum: f64,
    pub lr: f64,
    pub steps: usize,
    #[serde(flatten)]
    pub loss: MultiTaskLoss,
    pub seconds: f64,
}

pub struct Trainer {
    pub model: Model,
    pub config: Config,
    /// Completed epochs.
    pub epoch: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh model initialized from `config.train.seed`.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.train.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(1);
        Ok(Trainer { model, config, epoch: 0, rng })
    }

    /// Resumes from a checkpoint with zeroed momentum buffers.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = ckpt.to_model()?;
        model.store.reset_velocity();
        Ok(Trainer {
            model,
            config: ckpt.config.clone(),
            epoch: ckpt.epoch,
            rng: ckpt.rng.restore(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, &self.config, self.epoch, RngState::capture(&self.rng))
    }

    /// One pass over `data` in shuffled mini-batches; returns mean loss components.
    pub fn run_epoch(&mut self, data: &[Sample]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let start = Instant::now();
        let train = self.config.train.clone();
        let momentum = train.momentum_at(self.epoch as usize);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut mean = MultiTaskLoss::default();
        let mut steps = 0;
        for batch in order.chunks(train.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| self.rng.next_u64()).collect();
            let model = &self.model;
            let results = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &s)| model.sample_gradients(&data[i], &train, s))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            self.model.store.zero_grad();
            for (loss, grads) in &results {
                self.model.store.accumulate(grads, scale);
                mean.add_scaled(loss, 1.0 / data.len() as f64);
            }
            if train.grad_clip > 0.0 {
                self.model.store.clip_grad_norm(train.grad_clip);
            }
            sgd_momentum_step(&mut self.model.store, train.lr, momentum)?;
            steps += 1;
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            momentum,
            lr: train.lr,
            steps,
            loss: mean,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs `epochs` epochs, appending one JSON line per epoch to `log` and saving
    /// to `out` every `checkpoint_every` epochs and at the end.
    pub fn train(
        &mut self,
        data: &[Sample],
        epochs: usize,
        mut log: Option<&mut dyn Write>,
        out: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::with_capacity(epochs);
        let every = self.config.train.checkpoint_every;
        for k in 0..epochs {
            let entry = self.run_epoch(data)?;
            if !entry.loss.total.is_finite() {
                return Err(Error::Invalid(format!("training diverged at epoch {}", entry.epoch)));
            }
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&entry)?;
                writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
            }
            on_epoch(&entry);
            if let Some(path) = out {
                if k + 1 == epochs || (every > 0 && (k + 1) % every == 0) {
                    self.checkpoint().save(path)?;
                }
            }
            logs.push(entry);
        }
        if epochs == 0 {
            if let Some(path) = out {
                self.checkpoint().save(path)?;
            }
        }
        Ok(logs)
    }
}

/// Continues training a checkpoint on new data for `epochs` more epochs.
pub fn fine_tune(ckpt: &Checkpoint, data: &[Sample], epochs: usize, log: Option<&mut dyn Write>, out: Option<&Path>) -> Result<Trainer> {
    let mut t = Trainer::from_checkpoint(ckpt)?;
    t.train(data, epochs, log, out, |_| {})?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recognition::Alphabet;
    use crate::synth::{generate_document, GenConfig};

    fn tiny() -> (Config, Vec<Sample>) {
        let mut cfg = Config::default();
        cfg.model.backbone.fpn_channels = 8;
        cfg.model.rpn.head_hidden = 8;
        cfg.train.checkpoint_every = 0;
        let gen = GenConfig { height: 64, width: 64, font_size: (10.0, 12.0), lines: (1, 1), ..GenConfig::default() };
        let data = (0..4)
            .map(|i| Sample::from_document(i.to_string(), generate_document(&gen, &Alphabet::default(), i).unwrap()))
            .collect();
        (cfg, data)
    }

    #[test]
    fn step_count_and_determinism() {
        let (cfg, data) = tiny();
        let mut a = Trainer::new(cfg.clone()).unwrap();
        let logs = a.train(&data, 1, None, None, |_| {}).unwrap();
        assert_eq!(logs[0].steps, 2);
        assert_eq!(a.epoch, 1);
        let mut b = Trainer::new(cfg).unwrap();
        b.train(&data, 1, None, None, |_| {}).unwrap();
        assert_eq!(a.checkpoint().encode(), b.checkpoint().encode());
    }

    #[test]
    fn zero_epoch_fine_tune_is_identity() {
        let (cfg, data) = tiny();
        let t = Trainer::new(cfg).unwrap();
        let ck = t.checkpoint();
        let f = fine_tune(&ck, &data, 0, None, None).unwrap();
        assert_eq!(f.checkpoint().encode(), ck.encode());
        let f = fine_tune(&ck, &data, 1, None, None).unwrap();
        assert_eq!(f.epoch, ck.epoch + 1);
    }

    #[test]
    fn log_lines() {
        let (cfg, data) = tiny();
        let mut t = Trainer::new(cfg).unwrap();
        let mut buf = Vec::new();
        t.train(&data, 2, Some(&mut buf), None, |_| {}).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(v["epoch"], 2);
        assert_eq!(v["momentum"], 0.9);
        assert!(v["total"].as_f64().unwrap() > 0.0);
    }
}
