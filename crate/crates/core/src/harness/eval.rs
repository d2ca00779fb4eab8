//! Beam-search evaluation with view routing.

use serde::{Deserialize, Serialize};

use crate::corpus::SplitName;
use crate::dot::Views;
use crate::error::Result;
use crate::harness::data::Dataset;
use crate::harness::model::Model;
use crate::metrics::{score_corpus, MetricBundle, RewardWeights};

/// Cases routed through the model per forward pass.
const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub case_id: String,
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
    /// DoT models: the action the case was routed to.
    pub route: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: SplitName,
    pub views: Views,
    pub bundle: MetricBundle,
    pub scored: usize,
    pub skipped: usize,
    pub outputs: Vec<Generated>,
}

impl Evaluation {
    pub fn key(&self) -> String {
        format!("{}/{}", self.split, self.views)
    }

    /// Route counts (frontal, lateral, fused) for DoT models.
    pub fn route_counts(&self) -> Option<[usize; 3]> {
        let mut c = [0; 3];
        for o in &self.outputs {
            c[o.route?] += 1;
        }
        Some(c)
    }
}

/// Decode `views`-only inputs for a split (first `max_cases` cases when
/// non-zero) and score against the references.
pub fn evaluate(model: &Model, data: &Dataset, split: SplitName, views: Views, max_cases: usize) -> Result<Evaluation> {
    let (mut idx, skipped) = data.available(split, views);
    if skipped > 0 {
        log::warn!("{split}/{views}: {skipped} cases skipped for a missing view");
    }
    if max_cases > 0 {
        idx.truncate(max_cases);
    }
    let mut outputs = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(CHUNK) {
        let (ff, fl) = data.stacked(chunk, true)?;
        let routed = model.route(&ff, &fl, views)?;
        let ids = model.generate(&routed, model.cfg.eval.beam_size)?;
        for (k, (&i, seq)) in chunk.iter().zip(ids).enumerate() {
            let case = &data.cases[i];
            outputs.push(Generated {
                case_id: case.case_id.clone(),
                hypothesis: model.vocab.decode_report(&seq),
                reference: case.report.clone(),
                route: routed.routes.as_ref().map(|r| r[k]),
            });
        }
    }
    let pairs: Vec<(Vec<&str>, Vec<&str>)> = outputs
        .iter()
        .map(|o| {
            let h = o.hypothesis.iter().map(String::as_str).collect();
            let r = o.reference.iter().map(String::as_str).collect();
            (h, r)
        })
        .collect();
    let bundle = score_corpus(&pairs, model.cfg.eval.bleu_mode, &RewardWeights(model.cfg.rl.reward_weights));
    Ok(Evaluation {
        split,
        views,
        bundle,
        scored: outputs.len(),
        skipped,
        outputs,
    })
}

/// `|M_both − M_view| / M_both`; zero when `M_both` is zero.
pub fn relative_gap(both: f64, single: f64) -> f64 {
    if both == 0.0 {
        0.0
    } else {
        (both - single).abs() / both
    }
}
