//! Training loop: Adam with reduce-on-plateau scheduling on the epoch mean
//! training loss, per-epoch checkpoints and CSV log, and evaluation.

mod checkpoint;

pub use checkpoint::{Checkpoint, EpochLog, RngState, MAGIC, VERSION};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Clip;
use crate::error::{config_err, Error, Result};
use crate::metrics::{binarize, Evaluator, MetricReport};
use crate::model::{loss, LVNet, LossKind};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, ParameterStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Relative decrease of the best loss that counts as an improvement.
    pub plateau_threshold: f64,
    pub min_lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            plateau_factor: 0.9,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            min_lr: 1e-8,
            max_epochs: 200,
            batch_size: 1,
            seed: 0,
            loss: LossKind::SoftIou,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(config_err!("plateau_factor {} must lie in (0, 1)", self.plateau_factor));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.lr0 && self.lr0.is_finite()) {
            return Err(config_err!("need 0 < min_lr <= lr0, got {} and {}", self.min_lr, self.lr0));
        }
        if self.plateau_patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(config_err!("plateau_patience, batch_size and max_epochs must be positive"));
        }
        if !(self.plateau_threshold >= 0.0 && self.plateau_threshold < 1.0) {
            return Err(config_err!("plateau_threshold {} must lie in [0, 1)", self.plateau_threshold));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauState {
    pub lr: f64,
    pub best: f64,
    /// Epochs since the last improvement or reduction.
    pub bad_epochs: usize,
    /// Consecutive non-improving epochs spent at the minimum rate.
    pub floor_epochs: usize,
}

impl PlateauState {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauState {
            lr: cfg.lr0,
            best: f64::INFINITY,
            bad_epochs: 0,
            floor_epochs: 0,
        }
    }

    /// Whether training should stop because the rate is pinned at the floor.
    pub fn exhausted(&self, cfg: &TrainConfig) -> bool {
        self.floor_epochs >= cfg.plateau_patience
    }
}

/// Feeds one epoch loss to the scheduler and returns the rate for the next epoch.
pub fn reduce_on_plateau(state: &mut PlateauState, loss: f64, cfg: &TrainConfig) -> f64 {
    let improved = loss < state.best * (1.0 - cfg.plateau_threshold);
    if improved {
        state.best = loss;
        state.bad_epochs = 0;
        state.floor_epochs = 0;
    } else {
        if state.lr <= cfg.min_lr {
            state.floor_epochs += 1;
        }
        state.bad_epochs += 1;
        if state.bad_epochs >= cfg.plateau_patience {
            state.lr = (state.lr * cfg.plateau_factor).max(cfg.min_lr);
            state.bad_epochs = 0;
        }
    }
    state.lr
}

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "last.ckpt";

/// Stacks clips `[1, 1, T, H, W]` / `[1, T, H, W]` along the batch axis.
fn batch<'g>(g: &'g Graph<f32>, clips: &[&Clip]) -> Result<(Var<'g, f32>, Var<'g, f32>)> {
    let frames = clips.iter().map(|c| g.constant(&c.frames)).collect::<Result<Vec<_>>>()?;
    let masks = clips.iter().map(|c| g.constant(&c.masks)).collect::<Result<Vec<_>>>()?;
    Ok((Var::concat(&frames, 0)?, Var::concat(&masks, 0)?))
}

pub struct Trainer<'a> {
    pub net: &'a LVNet,
    pub cfg: TrainConfig,
    pub store: ParameterStore<f32>,
    pub adam: AdamState<f32>,
    pub plateau: PlateauState,
    pub history: Vec<EpochLog>,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(net: &'a LVNet, store: ParameterStore<f32>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            net,
            store,
            adam: AdamState::new(),
            plateau: PlateauState::new(cfg),
            history: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg: cfg.clone(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.history.len()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.net.cfg.hash(),
            epoch: self.epoch(),
            plateau: self.plateau,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            params: self.store.clone(),
            adam: self.adam.clone(),
            history: self.history.clone(),
        }
    }

    /// Restores a trainer from a checkpoint of the same model configuration.
    pub fn from_checkpoint(net: &'a LVNet, ckpt: Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if ckpt.config_hash != net.cfg.hash() {
            return Err(config_err!("checkpoint was written for a different model configuration"));
        }
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        Ok(Trainer {
            net,
            store: ckpt.params,
            adam: ckpt.adam,
            plateau: ckpt.plateau,
            history: ckpt.history,
            rng,
            cfg: cfg.clone(),
        })
    }

    /// One pass over `clips` in a freshly shuffled order.
    pub fn run_epoch(&mut self, clips: &[Clip]) -> Result<EpochLog> {
        if clips.is_empty() {
            return Err(Error::Usage("no training clips".into()));
        }
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut self.rng);
        let lr = self.plateau.lr;
        let adam_cfg = AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let members: Vec<&Clip> = chunk.iter().map(|&i| &clips[i]).collect();
            let g = Graph::new();
            let p = self.store.bind(&g)?;
            let (x, y) = batch(&g, &members)?;
            let l = loss(self.cfg.loss, self.net.forward(&p, x)?, y)?;
            let value = l.item() as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss became {value} in epoch {}", self.epoch() + 1)));
            }
            let mut grads = g.backward(l)?;
            p.accumulate_grads(&mut grads, &mut self.store);
            adam_step(&mut self.store, &mut self.adam, &adam_cfg)?;
            total += value;
            batches += 1;
        }
        let mean_loss = total / batches as f64;
        reduce_on_plateau(&mut self.plateau, mean_loss, &self.cfg);
        let log = EpochLog {
            epoch: self.epoch() + 1,
            mean_loss,
            lr,
        };
        self.history.push(log);
        Ok(log)
    }

    pub fn finished(&self) -> bool {
        self.epoch() >= self.cfg.max_epochs || self.plateau.exhausted(&self.cfg)
    }

    /// Trains until `max_epochs` or early stop. With `out_dir`, writes the
    /// checkpoint and log after every epoch; a failing epoch leaves the last
    /// good checkpoint in place.
    pub fn fit(&mut self, clips: &[Clip], out_dir: Option<&Path>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while !self.finished() {
            let log = self.run_epoch(clips)?;
            on_epoch(&log);
            if let Some(dir) = out_dir {
                self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
                write_log(&dir.join(LOG_FILE), &self.history)?;
            }
        }
        Ok(())
    }
}

pub fn log_csv(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch,mean_loss,lr\n");
    for h in history {
        writeln!(s, "{},{},{}", h.epoch, h.mean_loss, h.lr).expect("write to string");
    }
    s
}

fn write_log(path: &Path, history: &[EpochLog]) -> Result<()> {
    fs::write(path, log_csv(history)).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

/// Probability maps `[T, H, W]` for every clip, in clip order.
pub fn predict_clips(net: &LVNet, store: &ParameterStore<f32>, clips: &[Clip]) -> Result<Vec<Tensor<f32>>> {
    clips.iter().map(|c| Ok(net.predict(store, &c.frames)?.probabilities)).collect()
}

/// Non-overlapping clip inference, binarized at `threshold`, aggregated per frame.
pub fn evaluate(net: &LVNet, store: &ParameterStore<f32>, clips: &[Clip], threshold: f64) -> Result<MetricReport> {
    let mut ev = Evaluator::new();
    for (c, prob) in clips.iter().zip(predict_clips(net, store, clips)?) {
        let s = c.masks.shape();
        let (t, h, w) = (s[1], s[2], s[3]);
        let px = h * w;
        let pred = binarize(prob.data(), threshold);
        let gt: Vec<u8> = c.masks.data().iter().map(|&v| v as u8).collect();
        for k in 0..t {
            ev.add_frame(&pred[k * px..(k + 1) * px], &gt[k * px..(k + 1) * px], h, w)?;
        }
    }
    Ok(ev.report(threshold))
}

#[cfg(test)]
mod tests;
