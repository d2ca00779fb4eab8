//! Teacher-forced pre-training.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::SplitName;
use crate::dot::Views;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::TrainConfig;
use crate::harness::data::Dataset;
use crate::harness::eval::evaluate;
use crate::harness::export::{similarity_snapshot, probe_indices};
use crate::harness::model::Model;
use crate::harness::record::{EpochLog, Phase, RunRecord};
use crate::nn::{warmup_inv_sqrt, Adam, AdamConfig};
use crate::rng;

/// Loss values of one optimiser step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub ce: f64,
    pub mvco: Option<f64>,
    pub cmc: Option<f64>,
    pub total: f64,
    pub actions: Option<Vec<usize>>,
}

/// Shuffle `idx` and cut it into batches of `size`; a trailing batch of one
/// joins the previous batch, since in-batch contrast needs two items.
pub fn make_batches<R: Rng>(idx: &[usize], size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order = idx.to_vec();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

pub struct Trainer<'a> {
    pub model: Model,
    pub data: &'a Dataset,
    opt: Adam,
    shuffle: ChaCha8Rng,
    actions: ChaCha8Rng,
    steps: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, data: &'a Dataset) -> Result<Self> {
        let model = Model::new(cfg, data.vocab.clone())?;
        Ok(Self::from_model(model, data))
    }

    pub fn from_model(model: Model, data: &'a Dataset) -> Self {
        let cfg = &model.cfg;
        let opt = Adam::new(
            AdamConfig {
                clip_norm: cfg.pretrain.clip_norm,
                ..AdamConfig::default()
            },
            model.store.len(),
        );
        Self {
            shuffle: rng::stream(cfg.seed, "pretrain.shuffle"),
            actions: rng::stream(cfg.seed, "pretrain.dot"),
            opt,
            model,
            data,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn lr(&self) -> f64 {
        let p = &self.model.cfg.pretrain;
        warmup_inv_sqrt(p.lr, p.warmup_steps, self.steps + 1)
    }

    /// One optimiser step on the given cases.
    pub fn step(&mut self, idx: &[usize]) -> Result<StepStats> {
        let batch = self.data.batch(idx)?;
        let mut g = Graph::new();
        let losses = self
            .model
            .training_losses(&mut g, &batch, self.data.encoders.as_ref(), &mut self.actions)?;
        let total = g.scalar(losses.total);
        if !total.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite loss at step {}", self.steps + 1)));
        }
        let grads = g.backward(losses.total);
        let lr = self.lr();
        self.opt.step(&mut self.model.store, &grads, lr, &[]);
        self.model.clamp_temperatures();
        self.steps += 1;
        Ok(StepStats {
            ce: g.scalar(losses.ce),
            mvco: losses.mvco.map(|v| g.scalar(v)),
            cmc: losses.cmc.map(|t| g.scalar(t.loss)),
            total,
            actions: losses.actions.map(|a| a.chosen),
        })
    }

    /// One pass over the training split.
    pub fn epoch(&mut self, epoch: usize) -> Result<EpochLog> {
        let train = self.data.indices(SplitName::Train);
        let batches = make_batches(&train, self.model.cfg.pretrain.batch_size, &mut self.shuffle);
        let lr = self.lr();
        let mut sums = [0.0; 4];
        let mut counts = [0usize; 3];
        let (mut has_mvco, mut has_cmc, mut has_dot) = (false, false, false);
        for b in &batches {
            let s = self.step(b)?;
            sums[0] += s.ce;
            sums[3] += s.total;
            if let Some(v) = s.mvco {
                sums[1] += v;
                has_mvco = true;
            }
            if let Some(v) = s.cmc {
                sums[2] += v;
                has_cmc = true;
            }
            if let Some(a) = s.actions {
                has_dot = true;
                for k in a {
                    counts[k] += 1;
                }
            }
        }
        let n = batches.len().max(1) as f64;
        Ok(EpochLog {
            phase: Phase::Pretrain,
            epoch,
            steps: batches.len(),
            lr,
            ce: sums[0] / n,
            mvco: has_mvco.then(|| sums[1] / n),
            cmc: has_cmc.then(|| sums[2] / n),
            total: sums[3] / n,
            sample_reward: None,
            greedy_reward: None,
            action_counts: has_dot.then_some(counts),
            tau_m: self.model.tau_m_value(),
            checkpoint: None,
        })
    }
}

/// Where a run writes its files.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub dir: Option<PathBuf>,
}

impl Outputs {
    pub fn at(dir: &Path) -> Self {
        Self {
            dir: Some(dir.to_path_buf()),
        }
    }

    pub fn none() -> Self {
        Self { dir: None }
    }
}

/// Pre-train from scratch, then score the training and validation splits
/// with both views.
pub fn pretrain(cfg: &TrainConfig, data: &Dataset, name: &str, out: &Outputs) -> Result<(Model, RunRecord)> {
    let mut trainer = Trainer::new(cfg, data)?;
    let mut record = RunRecord::new(name, cfg, &trainer.model.arch_hash());
    let probe = probe_indices(data, cfg);
    for epoch in 1..=cfg.pretrain.epochs {
        let mut log = trainer.epoch(epoch)?;
        log::info!(
            "{name} epoch {epoch}: ce {:.4} total {:.4}{}",
            log.ce,
            log.total,
            log.action_counts.map(|c| format!(" actions {c:?}")).unwrap_or_default()
        );
        if let Some(dir) = &out.dir {
            let every = cfg.pretrain.checkpoint_every;
            if every > 0 && epoch % every == 0 {
                let file = format!("epoch_{epoch:03}.json");
                Checkpoint::of(&trainer.model, Phase::Pretrain, epoch).save(&dir.join(&file))?;
                log.checkpoint = Some(file);
            }
            if cfg.cmc.enabled {
                if let Some(p) = &probe {
                    let snap = similarity_snapshot(&trainer.model, data, p)?;
                    snap.write(&dir.join("similarity"), &format!("epoch_{epoch:03}"))?;
                }
            }
        }
        record.push_epoch(log);
    }
    let model = trainer.model;
    if let Some(dir) = &out.dir {
        Checkpoint::of(&model, Phase::Pretrain, cfg.pretrain.epochs).save(&dir.join("last.json"))?;
        record.checkpoints.push("last.json".into());
    }
    for split in [SplitName::Train, SplitName::Val] {
        let ev = evaluate(&model, data, split, Views::Both, cfg.eval.max_cases)?;
        record.skipped.insert(ev.key(), ev.skipped);
        record.metrics.insert(ev.key(), ev.bundle);
    }
    if let Some(dir) = &out.dir {
        record.write(dir)?;
    }
    Ok((model, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_and_merge_singletons() {
        let idx: Vec<usize> = (0..17).collect();
        let mut r = rng::stream(0, "t");
        let b = make_batches(&idx, 8, &mut r);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 9]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, idx);
        let b = make_batches(&idx[..16], 8, &mut r);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 8]);
        assert_eq!(make_batches(&[4], 8, &mut r), vec![vec![4]]);
    }
}
