//! Run records: a JSON document plus a per-epoch CSV table. No wall-clock
//! fields, so equal seeds and configs give byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::TrainConfig;
use crate::metrics::MetricBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Rl,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Rl => "rl",
        })
    }
}

/// Means over the optimiser steps of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub ce: f64,
    pub mvco: Option<f64>,
    pub cmc: Option<f64>,
    pub total: f64,
    /// RL only: mean sampled-sequence reward and mean greedy reward.
    pub sample_reward: Option<f64>,
    pub greedy_reward: Option<f64>,
    /// DoT only: how often each action (frontal, lateral, fused) was taken.
    pub action_counts: Option<[usize; 3]>,
    pub tau_m: Option<f64>,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub seed: u64,
    pub arch_hash: String,
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    /// Keyed `split/views`, e.g. `val/both`.
    pub metrics: BTreeMap<String, MetricBundle>,
    /// Cases skipped per evaluation key.
    pub skipped: BTreeMap<String, usize>,
    pub checkpoints: Vec<String>,
    /// Free-form scalar annotations (e.g. relative domain gaps).
    pub notes: BTreeMap<String, f64>,
}

impl RunRecord {
    pub fn new(name: &str, config: &TrainConfig, arch_hash: &str) -> Self {
        Self {
            name: name.into(),
            seed: config.seed,
            arch_hash: arch_hash.into(),
            config: config.clone(),
            epochs: Vec::new(),
            metrics: BTreeMap::new(),
            skipped: BTreeMap::new(),
            checkpoints: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn push_epoch(&mut self, log: EpochLog) {
        if let Some(c) = &log.checkpoint {
            self.checkpoints.push(c.clone());
        }
        self.epochs.push(log);
    }

    pub fn last_epoch(&self, phase: Phase) -> Option<&EpochLog> {
        self.epochs.iter().rev().find(|e| e.phase == phase)
    }

    /// Action frequencies over every logged DoT epoch, normalised.
    pub fn action_frequencies(&self) -> Option<[f64; 3]> {
        let mut total = [0usize; 3];
        let mut any = false;
        for e in &self.epochs {
            if let Some(c) = e.action_counts {
                any = true;
                for k in 0..3 {
                    total[k] += c[k];
                }
            }
        }
        let n: usize = total.iter().sum();
        (any && n > 0).then(|| total.map(|c| c as f64 / n as f64))
    }

    pub fn epochs_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
        let mut s = String::from(
            "phase,epoch,steps,lr,ce,mvco,cmc,total,sample_reward,greedy_reward,act_frontal,act_lateral,act_fused,tau_m\n",
        );
        for e in &self.epochs {
            let acts = e
                .action_counts
                .map(|c| format!("{},{},{}", c[0], c[1], c[2]))
                .unwrap_or_else(|| ",,".into());
            let _ = writeln!(
                s,
                "{},{},{},{:.12e},{:.12e},{},{},{:.12e},{},{},{},{}",
                e.phase,
                e.epoch,
                e.steps,
                e.lr,
                e.ce,
                opt(e.mvco),
                opt(e.cmc),
                e.total,
                opt(e.sample_reward),
                opt(e.greedy_reward),
                acts,
                opt(e.tau_m),
            );
        }
        s
    }

    /// Write `record.json` and `epochs.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("record.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("epochs.csv"), self.epochs_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
