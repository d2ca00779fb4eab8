//! Self-critical policy-gradient fine-tuning: a multinomial sample is
//! rewarded against the greedy decode of the same input.

use ndarray::Axis;

use crate::cmc::{divergence_values, similarity_values, SemanticEncoders};
use crate::corpus::{SplitName, BOS};
use crate::dot::Views;
use crate::error::{Error, Result};
use crate::generator::TeacherBatch;
use crate::graph::{Graph, Var};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::CmcMode;
use crate::harness::data::{Batch, Dataset};
use crate::harness::eval::evaluate;
use crate::harness::model::Model;
use crate::harness::record::{EpochLog, Phase, RunRecord};
use crate::harness::train::{make_batches, Outputs};
use crate::metrics::{mixed_reward, RewardWeights};
use crate::nn::{cosine_restart, Adam, AdamConfig};
use crate::rng;

/// `r_sample − r_greedy`, item by item.
pub fn advantages(sample: &[f64], greedy: &[f64]) -> Vec<f64> {
    sample.iter().zip(greedy).map(|(s, g)| s - g).collect()
}

/// `−(1/B) Σ_b A_b Σ_t log p(y_bt)` over the teacher-forced sampled
/// sequences.
pub fn policy_loss(g: &mut Graph, logits: Var, teacher: &TeacherBatch, advantage: &[f64]) -> Var {
    let weights: Vec<f64> = (0..teacher.targets.len())
        .map(|row| advantage[row / teacher.steps])
        .collect();
    g.weighted_nll(logits, &teacher.targets, &weights, teacher.batch as f64)
}

/// Decoder framing of sampled ids: `BOS` then the sample (EOS included
/// when it was emitted).
fn frame_samples(samples: &[Vec<usize>]) -> Vec<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            let mut f = Vec::with_capacity(s.len() + 1);
            f.push(BOS);
            f.extend_from_slice(s);
            f
        })
        .collect()
}

/// Per-item consistency penalty for reward mode: for each view, the KL
/// between the true and sampled image→text similarity rows.
fn consistency_penalty(model: &Model, enc: &SemanticEncoders, batch: &Batch, samples: &[Vec<usize>]) -> Result<Vec<f64>> {
    let sem = batch
        .sem
        .as_ref()
        .ok_or_else(|| Error::BackendUnavailable("semantic encoders".into()))?;
    let texts: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| if s.is_empty() { vec![crate::corpus::EOS] } else { s.clone() })
        .collect();
    let text = enc.encode_text_ids(&texts)?;
    let tau = model.tau_m_value().unwrap_or(model.cfg.cmc.tau_m_init);
    let mut pen = vec![0.0; samples.len()];
    for img in [&sem.image_f, &sem.image_l] {
        let pred = similarity_values(img, &text, tau)?;
        let truth = similarity_values(img, &sem.text_true, tau)?;
        for (b, p) in pen.iter_mut().enumerate() {
            let pr = pred.index_axis(Axis(0), b).insert_axis(Axis(0)).to_owned();
            let tr = truth.index_axis(Axis(0), b).insert_axis(Axis(0)).to_owned();
            *p += divergence_values(&pr, &tr, model.cfg.cmc.variant, model.cfg.cmc.kl_order)?;
        }
    }
    Ok(pen)
}

pub struct RlTrainer<'a> {
    pub model: Model,
    data: &'a Dataset,
    opt: Adam,
    shuffle: rand_chacha::ChaCha8Rng,
    actions: rand_chacha::ChaCha8Rng,
    sampler: rand_chacha::ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlStep {
    pub loss: f64,
    pub nll: f64,
    pub sample_reward: Vec<f64>,
    pub greedy_reward: Vec<f64>,
    pub actions: Option<Vec<usize>>,
}

impl<'a> RlTrainer<'a> {
    pub fn new(model: Model, data: &'a Dataset) -> Self {
        let cfg = &model.cfg;
        let opt = Adam::new(
            AdamConfig {
                clip_norm: cfg.pretrain.clip_norm,
                ..AdamConfig::default()
            },
            model.store.len(),
        );
        Self {
            shuffle: rng::stream(cfg.seed, "rl.shuffle"),
            actions: rng::stream(cfg.seed, "rl.dot"),
            sampler: rng::stream(cfg.seed, "rl.sample"),
            opt,
            model,
            data,
        }
    }

    fn rewards(&self, batch: &Batch, seqs: &[Vec<usize>]) -> Vec<f64> {
        let w = RewardWeights(self.model.cfg.rl.reward_weights);
        batch
            .idx
            .iter()
            .zip(seqs)
            .map(|(&i, s)| {
                let hyp = self.model.vocab.decode_report(s);
                mixed_reward(&hyp, &self.data.cases[i].report, &w)
            })
            .collect()
    }

    pub fn step(&mut self, idx: &[usize], lr: f64) -> Result<RlStep> {
        let batch = self.data.batch(idx)?;
        let model = &self.model;
        let mut g = Graph::new();
        let gi = model.gen_input(&mut g, &batch.feat_f, &batch.feat_l, &mut self.actions)?;
        let memory = g.value(gi.memory).clone();
        let samples = model.generator.sample(&model.store, &memory, &mut self.sampler)?;
        let greedy = model.generator.greedy(&model.store, &memory)?;
        let mut sample_reward = self.rewards(&batch, &samples);
        let mut greedy_reward = self.rewards(&batch, &greedy);
        let cfg = &model.cfg;
        if cfg.cmc.enabled && cfg.cmc.mode == CmcMode::Reward {
            let enc = self
                .data
                .encoders
                .as_ref()
                .ok_or_else(|| Error::BackendUnavailable("semantic encoders".into()))?;
            let ps = consistency_penalty(model, enc, &batch, &samples)?;
            let pg = consistency_penalty(model, enc, &batch, &greedy)?;
            for b in 0..idx.len() {
                sample_reward[b] -= cfg.cmc.weight * ps[b];
                greedy_reward[b] -= cfg.cmc.weight * pg[b];
            }
        }
        let adv = advantages(&sample_reward, &greedy_reward);
        let teacher = TeacherBatch::new(&frame_samples(&samples))?;
        let out = model
            .generator
            .decode_teacher_forced(&mut g, &model.store, gi.memory, &teacher)?;
        let mut loss = policy_loss(&mut g, out.logits, &teacher, &adv);
        let nll = g.cross_entropy(out.logits, &teacher.targets);
        if cfg.rl.keep_aux_losses {
            let reference = model
                .generator
                .decode_teacher_forced(&mut g, &model.store, gi.memory, &batch.teacher)?;
            let aux = model.aux_losses(&mut g, &gi, &reference, &batch, self.data.encoders.as_ref())?;
            loss = aux.add_to(&mut g, loss, cfg);
        }
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::InvalidInput("non-finite policy loss".into()));
        }
        let grads = g.backward(loss);
        let nll = g.scalar(nll);
        let actions = gi.actions.map(|a| a.chosen);
        self.opt.step(&mut self.model.store, &grads, lr, &[]);
        self.model.clamp_temperatures();
        Ok(RlStep {
            loss: value,
            nll,
            sample_reward,
            greedy_reward,
            actions,
        })
    }

    /// `epoch` counts from 1; the cosine schedule restarts every period.
    pub fn epoch(&mut self, epoch: usize) -> Result<EpochLog> {
        let cfg = &self.model.cfg;
        let lr = cosine_restart(cfg.rl.lr, cfg.rl.cosine_period, epoch - 1);
        let train = self.data.indices(SplitName::Train);
        let batches = make_batches(&train, cfg.rl.batch_size, &mut self.shuffle);
        let (mut loss, mut nll, mut rs, mut rg, mut items) = (0.0, 0.0, 0.0, 0.0, 0usize);
        let mut counts = [0usize; 3];
        let mut has_dot = false;
        for b in &batches {
            let s = self.step(b, lr)?;
            loss += s.loss;
            nll += s.nll;
            rs += s.sample_reward.iter().sum::<f64>();
            rg += s.greedy_reward.iter().sum::<f64>();
            items += b.len();
            if let Some(a) = s.actions {
                has_dot = true;
                for k in a {
                    counts[k] += 1;
                }
            }
        }
        let n = batches.len().max(1) as f64;
        let m = items.max(1) as f64;
        Ok(EpochLog {
            phase: Phase::Rl,
            epoch,
            steps: batches.len(),
            lr,
            ce: nll / n,
            mvco: None,
            cmc: None,
            total: loss / n,
            sample_reward: Some(rs / m),
            greedy_reward: Some(rg / m),
            action_counts: has_dot.then_some(counts),
            tau_m: self.model.tau_m_value(),
            checkpoint: None,
        })
    }
}

/// Fine-tune a pre-trained model, scoring validation (both views) before and
/// after. The record gains `val/both@pretrain` and `val/both`.
pub fn rl_finetune(model: Model, data: &Dataset, record: &mut RunRecord, out: &Outputs) -> Result<Model> {
    let cfg = model.cfg.clone();
    let before = evaluate(&model, data, SplitName::Val, Views::Both, cfg.eval.max_cases)?;
    record.metrics.insert(format!("{}@pretrain", before.key()), before.bundle);
    let mut trainer = RlTrainer::new(model, data);
    for epoch in 1..=cfg.rl.epochs {
        let mut log = trainer.epoch(epoch)?;
        log::info!(
            "rl epoch {epoch}: sample reward {:.4} greedy reward {:.4}",
            log.sample_reward.unwrap_or(0.0),
            log.greedy_reward.unwrap_or(0.0)
        );
        if let Some(dir) = &out.dir {
            let every = cfg.pretrain.checkpoint_every;
            if every > 0 && epoch % every == 0 {
                let file = format!("rl_epoch_{epoch:03}.json");
                Checkpoint::of(&trainer.model, Phase::Rl, epoch).save(&dir.join(&file))?;
                log.checkpoint = Some(file);
            }
        }
        record.push_epoch(log);
    }
    let model = trainer.model;
    if let Some(dir) = &out.dir {
        Checkpoint::of(&model, Phase::Rl, cfg.rl.epochs).save(&dir.join("rl_last.json"))?;
        record.checkpoints.push("rl_last.json".into());
    }
    let after = evaluate(&model, data, SplitName::Val, Views::Both, cfg.eval.max_cases)?;
    record.skipped.insert(after.key(), after.skipped);
    record.metrics.insert(after.key(), after.bundle);
    record.notes.insert(
        "rl_val_mixed_reward_delta".into(),
        after.bundle.mixed_reward - before.bundle.mixed_reward,
    );
    if let Some(dir) = &out.dir {
        record.write(dir)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS;
    use crate::graph::Mat;
    use approx::assert_abs_diff_eq;

    fn teacher() -> TeacherBatch {
        TeacherBatch::new(&[vec![BOS, 5, 6, EOS], vec![BOS, 7, EOS]]).unwrap()
    }

    fn logits(rows: usize) -> Mat {
        Mat::from_shape_fn((rows, 9), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.4)
    }

    fn grad_for(adv: &[f64]) -> Mat {
        let t = teacher();
        let mut g = Graph::new();
        let x = g.input(logits(t.targets.len()));
        let l = policy_loss(&mut g, x, &t, adv);
        g.backward(l).wrt(x).unwrap().clone()
    }

    #[test]
    fn equal_rewards_give_zero_gradient() {
        let adv = advantages(&[3.5, 1.25], &[3.5, 1.25]);
        assert_eq!(adv, vec![0.0, 0.0]);
        assert!(grad_for(&adv).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn translation_invariant() {
        let (s, gr) = ([2.0, 0.5], [1.0, 1.5]);
        let shifted_s = s.map(|v| v + 10.0);
        let shifted_g = gr.map(|v| v + 10.0);
        let a = advantages(&s, &gr);
        let b = advantages(&shifted_s, &shifted_g);
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let (ga, gb) = (grad_for(&a), grad_for(&b));
        for (x, y) in ga.iter().zip(gb.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn loss_weights_whole_sequence_by_advantage() {
        let t = teacher();
        let lm = logits(t.targets.len());
        let mut g = Graph::new();
        let x = g.input(lm.clone());
        let l = policy_loss(&mut g, x, &t, &[2.0, -1.0]);
        let mut expect = 0.0;
        for (row, target) in t.targets.iter().enumerate() {
            if let Some(tk) = target {
                let r = lm.row(row);
                let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
                let a = if row / t.steps == 0 { 2.0 } else { -1.0 };
                expect -= a * (r[*tk] - lse);
            }
        }
        assert_abs_diff_eq!(g.scalar(l), expect / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn framing() {
        assert_eq!(frame_samples(&[vec![4, EOS], vec![9]]), vec![vec![BOS, 4, EOS], vec![BOS, 9]]);
    }
}
