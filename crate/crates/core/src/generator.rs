//! Attention encoder-decoder over view embeddings.
//!
//! Pre-LN transformer blocks with learned positions. The decoder is run
//! teacher-forced for training and step by step (full-prefix recompute) for
//! greedy, sampled and beam decoding.

use std::cmp::Ordering;

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::graph::{AttnLayout, Graph, Mat, Var};
use crate::nn::{normal, Dense, ParamId, ParamStore};
use crate::rng;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub regions: usize,
    /// Longest report (in words, EOS excluded) the decoder can emit.
    pub max_len: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.insert(&format!("{name}.gamma"), Mat::ones((1, d))),
            beta: store.insert(&format!("{name}.beta"), Mat::zeros((1, d))),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
struct MultiHead {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
}

impl MultiHead {
    fn new<R: Rng>(store: &mut ParamStore, r: &mut R, name: &str, d: usize) -> Self {
        Self {
            q: Dense::new(store, r, &format!("{name}.q"), d, d),
            k: Dense::new(store, r, &format!("{name}.k"), d, d),
            v: Dense::new(store, r, &format!("{name}.v"), d, d),
            o: Dense::new(store, r, &format!("{name}.o"), d, d),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, xq: Var, xkv: Var, layout: AttnLayout) -> Var {
        let q = self.q.forward(g, store, xq);
        let k = self.k.forward(g, store, xkv);
        let v = self.v.forward(g, store, xkv);
        let a = g.attention(q, k, v, layout);
        self.o.forward(g, store, a)
    }
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    up: Dense,
    down: Dense,
}

impl FeedForward {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.relu(h);
        self.down.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: MultiHead,
    ln_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: MultiHead,
    ln_cross: Norm,
    cross_attn: MultiHead,
    ln_ff: Norm,
    ff: FeedForward,
}

/// Teacher-forcing layout for a batch of framed reports.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherBatch {
    pub batch: usize,
    /// Padded step count shared by every item.
    pub steps: usize,
    /// Decoder input ids, `batch * steps`, PAD after each item's end.
    pub inputs: Vec<usize>,
    /// Next-token targets aligned with `inputs`; `None` on padding.
    pub targets: Vec<Option<usize>>,
    /// Per item, the flat row index of its last non-PAD step.
    pub last: Vec<usize>,
}

impl TeacherBatch {
    /// `framed[b]` is `BOS w₁ … wₙ EOS`; inputs drop the final id, targets the
    /// first.
    pub fn new(framed: &[Vec<usize>]) -> Result<Self> {
        if framed.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if framed.iter().any(|s| s.len() < 2) {
            return Err(Error::InvalidInput("target must hold at least BOS and one more id".into()));
        }
        let batch = framed.len();
        let steps = framed.iter().map(|s| s.len() - 1).max().unwrap_or(1);
        let mut inputs = vec![PAD; batch * steps];
        let mut targets = vec![None; batch * steps];
        let mut last = Vec::with_capacity(batch);
        for (b, seq) in framed.iter().enumerate() {
            let n = seq.len() - 1;
            for t in 0..n {
                inputs[b * steps + t] = seq[t];
                targets[b * steps + t] = Some(seq[t + 1]);
            }
            last.push(b * steps + n - 1);
        }
        Ok(Self {
            batch,
            steps,
            inputs,
            targets,
            last,
        })
    }

    /// Rows that carry a target, in order.
    pub fn target_rows(&self) -> Vec<usize> {
        (0..self.targets.len()).filter(|&i| self.targets[i].is_some()).collect()
    }
}

/// Graph handles from one decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// (batch·steps) × vocab, pre-softmax.
    pub logits: Var,
    /// batch × d_model: final-step cross-attention context (c).
    pub context: Var,
    /// batch × d_model: final-step decoder hidden state (h).
    pub hidden: Var,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    embed: ParamId,
    pos_enc: ParamId,
    pos_dec: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    pub out: Dense,
}

impl Generator {
    pub fn new(store: &mut ParamStore, seed: u64, cfg: GeneratorConfig) -> Result<Self> {
        if !cfg.d_model.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                cfg.d_model, cfg.heads
            )));
        }
        let d = cfg.d_model;
        let mut r = rng::stream(seed, "init.generator");
        let std = 1.0 / (d as f64).sqrt();
        let embed = store.insert("gen.embed", normal(&mut r, cfg.vocab_size, d, std));
        let pos_enc = store.insert("gen.pos_enc", normal(&mut r, cfg.regions, d, 0.1 * std));
        let pos_dec = store.insert("gen.pos_dec", normal(&mut r, cfg.max_len + 1, d, 0.1 * std));
        let ff = |store: &mut ParamStore, r: &mut rand_chacha::ChaCha8Rng, name: &str| FeedForward {
            up: Dense::new(store, r, &format!("{name}.up"), d, cfg.d_ff),
            down: Dense::new(store, r, &format!("{name}.down"), cfg.d_ff, d),
        };
        let encoder = (0..cfg.enc_layers)
            .map(|i| {
                let p = format!("gen.enc{i}");
                EncoderLayer {
                    ln_attn: Norm::new(store, &format!("{p}.ln_attn"), d),
                    attn: MultiHead::new(store, &mut r, &format!("{p}.attn"), d),
                    ln_ff: Norm::new(store, &format!("{p}.ln_ff"), d),
                    ff: ff(store, &mut r, &format!("{p}.ff")),
                }
            })
            .collect();
        let enc_norm = Norm::new(store, "gen.enc_norm", d);
        let decoder = (0..cfg.dec_layers)
            .map(|i| {
                let p = format!("gen.dec{i}");
                DecoderLayer {
                    ln_self: Norm::new(store, &format!("{p}.ln_self"), d),
                    self_attn: MultiHead::new(store, &mut r, &format!("{p}.self"), d),
                    ln_cross: Norm::new(store, &format!("{p}.ln_cross"), d),
                    cross_attn: MultiHead::new(store, &mut r, &format!("{p}.cross"), d),
                    ln_ff: Norm::new(store, &format!("{p}.ln_ff"), d),
                    ff: ff(store, &mut r, &format!("{p}.ff")),
                }
            })
            .collect();
        let dec_norm = Norm::new(store, "gen.dec_norm", d);
        let out = Dense::new(store, &mut r, "gen.out", d, cfg.vocab_size);
        Ok(Self {
            cfg,
            embed,
            pos_enc,
            pos_dec,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out,
        })
    }

    /// Contextualise a (batch·R) × d_model view embedding. Shape-preserving.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (rows, d) = g.shape(x);
        let r = self.cfg.regions;
        if d != self.cfg.d_model || rows % r != 0 || rows == 0 {
            return Err(Error::Dimension(format!(
                "encoder expects (k·{r}) × {}, got {rows} × {d}",
                self.cfg.d_model
            )));
        }
        let batch = rows / r;
        let pos_idx: Vec<usize> = (0..rows).map(|i| i % r).collect();
        let pos_table = g.param(store, self.pos_enc);
        let pos = g.gather_rows(pos_table, &pos_idx);
        let mut h = g.add(x, pos);
        let layout = AttnLayout {
            batch,
            q_len: r,
            k_len: r,
            heads: self.cfg.heads,
            causal: false,
        };
        for layer in &self.encoder {
            let n = layer.ln_attn.forward(g, store, h);
            let a = layer.attn.forward(g, store, n, n, layout);
            h = g.add(h, a);
            let n = layer.ln_ff.forward(g, store, h);
            let f = layer.ff.forward(g, store, n);
            h = g.add(h, f);
        }
        Ok(self.enc_norm.forward(g, store, h))
    }

    /// Run the decoder on `inputs` (batch × steps ids, flattened). Returns
    /// the logits, the last layer's cross-attention output and the final
    /// hidden states, all with one row per input position.
    fn decode_rows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: Var,
        inputs: &[usize],
        batch: usize,
        steps: usize,
    ) -> Result<(Var, Var, Var)> {
        if steps > self.cfg.max_len + 1 {
            return Err(Error::InvalidInput(format!(
                "{steps} decoder steps exceed the positional table ({})",
                self.cfg.max_len + 1
            )));
        }
        let (mrows, _) = g.shape(memory);
        if mrows != batch * self.cfg.regions {
            return Err(Error::Dimension(format!(
                "memory has {mrows} rows, expected {}",
                batch * self.cfg.regions
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary")));
        }
        let embed = g.param(store, self.embed);
        let tok = g.gather_rows(embed, inputs);
        let pos_idx: Vec<usize> = (0..inputs.len()).map(|i| i % steps).collect();
        let pos_table = g.param(store, self.pos_dec);
        let pos = g.gather_rows(pos_table, &pos_idx);
        let mut h = g.add(tok, pos);
        let self_layout = AttnLayout {
            batch,
            q_len: steps,
            k_len: steps,
            heads: self.cfg.heads,
            causal: true,
        };
        let cross_layout = AttnLayout {
            batch,
            q_len: steps,
            k_len: self.cfg.regions,
            heads: self.cfg.heads,
            causal: false,
        };
        let mut context = h;
        for layer in &self.decoder {
            let n = layer.ln_self.forward(g, store, h);
            let a = layer.self_attn.forward(g, store, n, n, self_layout);
            h = g.add(h, a);
            let n = layer.ln_cross.forward(g, store, h);
            context = layer.cross_attn.forward(g, store, n, memory, cross_layout);
            h = g.add(h, context);
            let n = layer.ln_ff.forward(g, store, h);
            let f = layer.ff.forward(g, store, n);
            h = g.add(h, f);
        }
        let hidden = self.dec_norm.forward(g, store, h);
        let logits = self.out.forward(g, store, hidden);
        Ok((logits, context, hidden))
    }

    pub fn decode_teacher_forced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: Var,
        batch: &TeacherBatch,
    ) -> Result<DecoderOutput> {
        let (logits, context, hidden) =
            self.decode_rows(g, store, memory, &batch.inputs, batch.batch, batch.steps)?;
        Ok(DecoderOutput {
            logits,
            context: g.gather_rows(context, &batch.last),
            hidden: g.gather_rows(hidden, &batch.last),
        })
    }

    /// Mean token cross-entropy over non-PAD positions.
    pub fn cross_entropy(&self, g: &mut Graph, out: &DecoderOutput, batch: &TeacherBatch) -> Var {
        g.cross_entropy(out.logits, &batch.targets)
    }

    /// Encode outside a training graph.
    pub fn encode_value(&self, store: &ParamStore, x: &Mat) -> Result<Mat> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let m = self.encode(&mut g, store, xv)?;
        Ok(g.value(m).clone())
    }

    /// Next-token log-probabilities after each prefix (BOS is implied).
    /// `memory` holds one R-row block per prefix; prefixes share a length.
    /// PAD and BOS are never proposed.
    pub fn next_log_probs(&self, store: &ParamStore, memory: &Mat, prefixes: &[Vec<usize>]) -> Result<Mat> {
        let batch = prefixes.len();
        let steps = prefixes.first().map_or(0, |p| p.len()) + 1;
        if prefixes.iter().any(|p| p.len() + 1 != steps) {
            return Err(Error::InvalidInput("prefixes must share a length".into()));
        }
        let mut inputs = Vec::with_capacity(batch * steps);
        for p in prefixes {
            inputs.push(BOS);
            inputs.extend_from_slice(p);
        }
        let mut g = Graph::new();
        let mem = g.constant(memory.clone());
        let (logits, _, _) = self.decode_rows(&mut g, store, mem, &inputs, batch, steps)?;
        let rows: Vec<usize> = (0..batch).map(|b| b * steps + steps - 1).collect();
        let mut last = g.value(logits).select(Axis(0), &rows);
        for mut row in last.rows_mut() {
            row[PAD] = f64::NEG_INFINITY;
            row[BOS] = f64::NEG_INFINITY;
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        Ok(last)
    }

    fn lockstep<F>(&self, store: &ParamStore, memory: &Mat, mut pick: F) -> Result<Vec<Vec<usize>>>
    where
        F: FnMut(ndarray::ArrayView1<f64>) -> usize,
    {
        let batch = memory.nrows() / self.cfg.regions;
        let mut seqs: Vec<Vec<usize>> = vec![Vec::new(); batch];
        let mut done = vec![false; batch];
        for _ in 0..=self.cfg.max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let lp = self.next_log_probs(store, memory, &seqs)?;
            for b in 0..batch {
                if done[b] {
                    seqs[b].push(PAD);
                    continue;
                }
                let t = pick(lp.row(b));
                seqs[b].push(t);
                done[b] = t == EOS;
            }
        }
        for s in &mut seqs {
            if let Some(end) = s.iter().position(|&t| t == EOS) {
                s.truncate(end + 1);
            }
        }
        Ok(seqs)
    }

    /// Greedy decode for every item in `memory` ((batch·R) × d). Each output
    /// ends with EOS unless the length limit was hit first.
    pub fn greedy(&self, store: &ParamStore, memory: &Mat) -> Result<Vec<Vec<usize>>> {
        self.lockstep(store, memory, argmax)
    }

    /// Multinomial sampling from the model distribution.
    pub fn sample<R: Rng>(&self, store: &ParamStore, memory: &Mat, rng: &mut R) -> Result<Vec<Vec<usize>>> {
        self.lockstep(store, memory, |row| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = EOS;
            for (i, &lp) in row.iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                acc += lp.exp();
                pick = i;
                if u < acc {
                    break;
                }
            }
            pick
        })
    }

    /// Beam search for a single item (`memory` is R × d).
    pub fn beam(&self, store: &ParamStore, memory: &Mat, beam_size: usize) -> Result<Vec<usize>> {
        let scorer = GeneratorScorer {
            generator: self,
            store,
            memory,
        };
        beam_search(&scorer, beam_size, self.cfg.max_len + 1)
    }

    pub fn embed_param(&self) -> ParamId {
        self.embed
    }
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A model that scores the next token given a prefix.
pub trait StepScorer {
    fn eos(&self) -> usize;
    /// One row of log-probabilities per prefix.
    fn log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

struct GeneratorScorer<'a> {
    generator: &'a Generator,
    store: &'a ParamStore,
    memory: &'a Mat,
}

impl StepScorer for GeneratorScorer<'_> {
    fn eos(&self) -> usize {
        EOS
    }

    fn log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let tiled = ndarray::concatenate(
            Axis(0),
            &vec![self.memory.view(); prefixes.len()],
        )
        .map_err(|e| Error::Dimension(e.to_string()))?;
        let lp = self.generator.next_log_probs(self.store, &tiled, prefixes)?;
        Ok(lp.rows().into_iter().map(|r| r.to_vec()).collect())
    }
}

/// Length-normalised score: total log-probability over generated tokens.
pub fn normalized_score(log_prob: f64, len: usize) -> f64 {
    log_prob / len.max(1) as f64
}

/// Beam search ranked by length-normalised log-probability. Hypotheses end
/// at EOS or after `max_steps` tokens. Ties prefer lower token ids, so
/// `beam_size == 1` reproduces greedy argmax decoding.
pub fn beam_search<S: StepScorer>(scorer: &S, beam_size: usize, max_steps: usize) -> Result<Vec<usize>> {
    if beam_size == 0 {
        return Err(Error::InvalidInput("beam size must be at least 1".into()));
    }
    let eos = scorer.eos();
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_steps {
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|(p, _)| p.clone()).collect();
        let lps = scorer.log_probs(&prefixes)?;
        let mut cand: Vec<(usize, usize, f64)> = Vec::new();
        for (i, row) in lps.iter().enumerate() {
            for (t, &lp) in row.iter().enumerate() {
                if lp.is_finite() {
                    cand.push((i, t, alive[i].1 + lp));
                }
            }
        }
        cand.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        let mut next = Vec::new();
        for (i, t, score) in cand.into_iter().take(beam_size) {
            let mut seq = alive[i].0.clone();
            seq.push(t);
            if t == eos {
                finished.push((seq, score));
            } else {
                next.push((seq, score));
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= beam_size {
            break;
        }
    }
    let pool = if finished.is_empty() { alive } else { finished.into_iter().chain(alive).collect() };
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (seq, lp) in pool {
        let score = normalized_score(lp, seq.len());
        if best.as_ref().is_none_or(|b| score > b.1) {
            best = Some((seq, score));
        }
    }
    Ok(best.map(|b| b.0).unwrap_or_default())
}
