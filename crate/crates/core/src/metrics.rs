//! BLEU-1..4, METEOR-lite and ROUGE-L over token sequences, plus the
//! weighted mixed reward used for self-critical training.

use std::collections::HashMap;
use std::sync::LazyLock;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const DEFAULT_REWARD_WEIGHTS: [f64; 6] = [2.0, 2.0, 1.0, 1.0, 2.0, 2.0];

static STEMMER: LazyLock<Stemmer> = LazyLock::new(|| Stemmer::create(Algorithm::English));

pub fn stem(token: &str) -> String {
    STEMMER.stem(token).into_owned()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub mixed_reward: f64,
}

impl MetricBundle {
    pub fn components(&self) -> [f64; 6] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.meteor, self.rouge_l]
    }

    fn with_reward(mut self, weights: &RewardWeights) -> Self {
        self.mixed_reward = weights.combine(&self.components());
        self
    }
}

/// Weights for (B1, B2, B3, B4, METEOR, ROUGE-L).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights(pub [f64; 6]);

impl Default for RewardWeights {
    fn default() -> Self {
        Self(DEFAULT_REWARD_WEIGHTS)
    }
}

impl RewardWeights {
    pub fn combine(&self, components: &[f64; 6]) -> f64 {
        self.0.iter().zip(components).map(|(w, c)| w * c).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuMode {
    #[default]
    Corpus,
    Sentence,
}

impl std::str::FromStr for BleuMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corpus" => Ok(Self::Corpus),
            "sentence" => Ok(Self::Sentence),
            other => Err(Error::Unknown {
                kind: "BLEU mode",
                value: other.into(),
            }),
        }
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the hypothesis n-gram total.
pub fn modified_precision<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let clipped = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, hyp.len().saturating_sub(n - 1))
}

/// Geometric mean of per-order precisions times the brevity penalty.
/// Orders above 1 with no clipped match use (m+1)/(t+1); a zero unigram
/// match gives 0.
fn bleu_from_counts(matches: &[usize], totals: &[usize], hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 || matches[0] == 0 {
        return 0.0;
    }
    let n = matches.len();
    let mut log_sum = 0.0;
    for k in 0..n {
        let p = if k > 0 && matches[k] == 0 {
            1.0 / (totals[k] as f64 + 1.0)
        } else if totals[k] == 0 {
            1.0
        } else {
            matches[k] as f64 / totals[k] as f64
        };
        log_sum += p.ln();
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    (bp * (log_sum / n as f64).exp()).clamp(0.0, 1.0)
}

pub fn bleu_n<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let (m, t): (Vec<usize>, Vec<usize>) = (1..=n).map(|k| modified_precision(hyp, reference, k)).unzip();
    bleu_from_counts(&m, &t, hyp.len(), reference.len())
}

/// Corpus BLEU: counts and lengths are summed over all pairs before the
/// precisions and brevity penalty are formed.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let mut m = vec![0; n];
    let mut t = vec![0; n];
    let (mut hl, mut rl) = (0, 0);
    for (h, r) in pairs {
        for k in 1..=n {
            let (a, b) = modified_precision(h, r, k);
            m[k - 1] += a;
            t[k - 1] += b;
        }
        hl += h.len();
        rl += r.len();
    }
    bleu_from_counts(&m, &t, hl, rl)
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hyp, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Unigram alignment as (hyp index, ref index) pairs: exact matches first,
/// then stem matches, each hypothesis token taking the leftmost free
/// reference token.
pub fn meteor_alignment<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Vec<(usize, usize)> {
    let mut ref_used = vec![false; reference.len()];
    let mut hyp_used = vec![false; hyp.len()];
    let mut pairs = Vec::new();
    for (i, h) in hyp.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && reference[j].as_ref() == h.as_ref()) {
            ref_used[j] = true;
            hyp_used[i] = true;
            pairs.push((i, j));
        }
    }
    let ref_stems: Vec<String> = reference.iter().map(|t| stem(t.as_ref())).collect();
    for (i, h) in hyp.iter().enumerate() {
        if hyp_used[i] {
            continue;
        }
        let hs = stem(h.as_ref());
        if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && ref_stems[j] == hs) {
            ref_used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Number of maximal runs that are contiguous in both sequences.
pub fn chunk_count(alignment: &[(usize, usize)]) -> usize {
    if alignment.is_empty() {
        return 0;
    }
    1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

pub fn meteor_lite<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let align = meteor_alignment(hyp, reference);
    let m = align.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / hyp.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let frag = chunk_count(&align) as f64 / m;
    f_mean * (1.0 - 0.5 * frag.powi(3))
}

/// Sentence-level bundle for one pair.
pub fn score_pair<S: AsRef<str>>(hyp: &[S], reference: &[S], weights: &RewardWeights) -> MetricBundle {
    MetricBundle {
        bleu1: bleu_n(hyp, reference, 1),
        bleu2: bleu_n(hyp, reference, 2),
        bleu3: bleu_n(hyp, reference, 3),
        bleu4: bleu_n(hyp, reference, 4),
        meteor: meteor_lite(hyp, reference),
        rouge_l: rouge_l(hyp, reference),
        mixed_reward: 0.0,
    }
    .with_reward(weights)
}

pub fn mixed_reward<S: AsRef<str>>(hyp: &[S], reference: &[S], weights: &RewardWeights) -> f64 {
    score_pair(hyp, reference, weights).mixed_reward
}

/// Corpus scores. BLEU follows `mode`; METEOR-lite and ROUGE-L are
/// averaged over pairs.
pub fn score_corpus<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)], mode: BleuMode, weights: &RewardWeights) -> MetricBundle {
    if pairs.is_empty() {
        return MetricBundle::default();
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&[S], &[S]) -> f64| pairs.iter().map(|(h, r)| f(h, r)).sum::<f64>() / n;
    let bleu = |k: usize| match mode {
        BleuMode::Corpus => corpus_bleu(pairs, k),
        BleuMode::Sentence => mean(&|h, r| bleu_n(h, r, k)),
    };
    MetricBundle {
        bleu1: bleu(1),
        bleu2: bleu(2),
        bleu3: bleu(3),
        bleu4: bleu(4),
        meteor: mean(&|h, r| meteor_lite(h, r)),
        rouge_l: mean(&|h, r| rouge_l(h, r)),
        mixed_reward: 0.0,
    }
    .with_reward(weights)
}
