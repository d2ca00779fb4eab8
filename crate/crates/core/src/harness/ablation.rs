//! Named variant bundles and the single-view domain-gap report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cmc::Variant;
use crate::corpus::SplitName;
use crate::dot::{Strategy, Views};
use crate::error::{Error, Result};
use crate::harness::config::{MvcoSource, TrainConfig, ViewInput};
use crate::harness::data::Dataset;
use crate::harness::eval::{evaluate, relative_gap};
use crate::harness::record::RunRecord;
use crate::harness::train::{pretrain, Outputs};

pub const VARIANTS: [&str; 15] = [
    "base-cat",
    "mvco-cat",
    "mvco-fus",
    "mvco-dot",
    "mvco-cmc",
    "c2m-dot",
    "dot-random",
    "dot-argmax",
    "dot-gumbel",
    "cmc-cl",
    "cmc-mse",
    "cmc-js",
    "cmc-kl",
    "mvco-encoder",
    "mvco-decoder",
];

/// `base` with the module flags of a named variant. Training settings are
/// left as they are.
pub fn variant_config(base: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let mut c = base.clone();
    let set = |c: &mut TrainConfig, input: ViewInput, mvco: bool, dot: bool, cmc: bool| {
        c.model.view_input = input;
        c.mvco.enabled = mvco;
        c.dot.enabled = dot;
        c.cmc.enabled = cmc;
    };
    use ViewInput::{Concat, Fusion};
    match name {
        "base-cat" => set(&mut c, Concat, false, false, false),
        "mvco-cat" => set(&mut c, Concat, true, false, false),
        "mvco-fus" => set(&mut c, Fusion, true, false, false),
        "mvco-dot" => set(&mut c, Fusion, true, true, false),
        "mvco-cmc" => set(&mut c, Fusion, true, false, true),
        "c2m-dot" => set(&mut c, Fusion, true, true, true),
        "dot-random" | "dot-argmax" | "dot-gumbel" => {
            set(&mut c, Fusion, true, true, false);
            c.dot.strategy = name["dot-".len()..].parse::<Strategy>()?;
        }
        "cmc-cl" | "cmc-mse" | "cmc-js" | "cmc-kl" => {
            set(&mut c, Fusion, false, false, true);
            c.cmc.variant = name["cmc-".len()..].parse::<Variant>()?;
        }
        "mvco-encoder" => {
            set(&mut c, Fusion, true, false, false);
            c.mvco.source = MvcoSource::Encoder;
        }
        "mvco-decoder" => {
            set(&mut c, Fusion, true, false, false);
            c.mvco.source = MvcoSource::Decoder;
        }
        other => {
            return Err(Error::Unknown {
                kind: "ablation variant",
                value: other.into(),
            })
        }
    }
    c.validate()?;
    Ok(c)
}

/// Pre-train a variant, then score the test split with each view set.
/// Notes gain `gap_bleu4_frontal` and `gap_bleu4_lateral`.
pub fn ablate(base: &TrainConfig, name: &str, out: &Outputs) -> Result<RunRecord> {
    let cfg = variant_config(base, name)?;
    let data = Dataset::prepare(&cfg)?;
    let (model, mut record) = pretrain(&cfg, &data, name, &Outputs::none())?;
    let mut bleu4 = BTreeMap::new();
    for views in [Views::Both, Views::Frontal, Views::Lateral] {
        let ev = evaluate(&model, &data, SplitName::Test, views, cfg.eval.max_cases)?;
        bleu4.insert(views.to_string(), ev.bundle.bleu4);
        if let Some(c) = ev.route_counts() {
            for (k, n) in ["frontal", "lateral", "fused"].iter().zip(c) {
                record.notes.insert(format!("routes_{views}_{k}"), n as f64);
            }
        }
        record.skipped.insert(ev.key(), ev.skipped);
        record.metrics.insert(ev.key(), ev.bundle);
    }
    for v in ["frontal", "lateral"] {
        let gap = relative_gap(bleu4["both"], bleu4[v]);
        log::info!("{name}: relative BLEU-4 gap both vs {v} = {gap:.4}");
        record.notes.insert(format!("gap_bleu4_{v}"), gap);
    }
    if let Some(dir) = &out.dir {
        record.write(dir)?;
    }
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub variant: String,
    pub seed: u64,
    pub bleu4_both: f64,
    pub bleu4_frontal: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
    /// Mean relative frontal gap per variant.
    pub means: BTreeMap<String, f64>,
}

impl GapReport {
    pub fn from_records(records: &[RunRecord]) -> Self {
        let mut rows = Vec::new();
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in records {
            let (Some(both), Some(front)) = (r.metrics.get("test/both"), r.metrics.get("test/frontal")) else {
                continue;
            };
            let gap = relative_gap(both.bleu4, front.bleu4);
            rows.push(GapRow {
                variant: r.name.clone(),
                seed: r.seed,
                bleu4_both: both.bleu4,
                bleu4_frontal: front.bleu4,
                gap,
            });
            let e = sums.entry(r.name.clone()).or_default();
            e.0 += gap;
            e.1 += 1;
        }
        let means = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        Self { rows, means }
    }

    /// Whether `a`'s mean gap is below `b`'s; `None` if either is missing.
    pub fn smaller(&self, a: &str, b: &str) -> Option<bool> {
        Some(self.means.get(a)? < self.means.get(b)?)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("variant\tseed\tbleu4_both\tbleu4_frontal\trelative_gap\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                r.variant, r.seed, r.bleu4_both, r.bleu4_frontal, r.gap
            );
        }
        for (k, m) in &self.means {
            let _ = writeln!(s, "{k}\tmean\t\t\t{m:.6}");
        }
        if let Some(t) = self.smaller("mvco-dot", "mvco-fus") {
            let _ = writeln!(s, "mvco-dot gap below mvco-fus: {t}");
        }
        s
    }
}
