//! Analysis exports: per-view semantic embeddings and the image↔report
//! similarity matrices.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;

use crate::cmc::{pooling_for_rows, similarity_values};
use crate::corpus::SplitName;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat};
use crate::harness::config::TrainConfig;
use crate::harness::data::Dataset;
use crate::harness::model::Model;
use crate::rng;

/// Cases sampled for the embedding export.
pub const EMBEDDING_CASES: usize = 50;

/// Fixed probe batch for similarity snapshots: the first `batch_size`
/// validation cases (or training cases if validation is too small).
pub fn probe_indices(data: &Dataset, cfg: &TrainConfig) -> Option<Vec<usize>> {
    let n = cfg.pretrain.batch_size.max(2);
    [SplitName::Val, SplitName::Train]
        .into_iter()
        .map(|s| data.indices(s))
        .find(|idx| idx.len() >= 2)
        .map(|mut idx| {
            idx.truncate(n);
            idx
        })
}

/// Predicted and true view→text similarity matrices for one probe batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilaritySnapshot {
    pub case_ids: Vec<String>,
    pub frontal_pred: Mat,
    pub frontal_true: Mat,
    pub lateral_pred: Mat,
    pub lateral_true: Mat,
}

impl SimilaritySnapshot {
    pub fn matrices(&self) -> [(&'static str, &Mat); 4] {
        [
            ("frontal_pred", &self.frontal_pred),
            ("frontal_true", &self.frontal_true),
            ("lateral_pred", &self.lateral_pred),
            ("lateral_true", &self.lateral_true),
        ]
    }

    /// One CSV grid per matrix, `{prefix}_{name}.csv`, plus the case order.
    pub fn write(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, m) in self.matrices() {
            let path = dir.join(format!("{prefix}_{name}.csv"));
            std::fs::write(&path, grid_csv(m))?;
            written.push(path);
        }
        let ids = dir.join(format!("{prefix}_cases.txt"));
        std::fs::write(&ids, self.case_ids.join("\n") + "\n")?;
        written.push(ids);
        Ok(written)
    }
}

pub fn grid_csv(m: &Mat) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Similarity matrices at the model's current τ_m (or the configured
/// initial value for models without one). Predicted reports are the
/// teacher-forced token distributions under both-view routing.
pub fn similarity_snapshot(model: &Model, data: &Dataset, idx: &[usize]) -> Result<SimilaritySnapshot> {
    let enc = data
        .encoders
        .as_ref()
        .ok_or_else(|| Error::BackendUnavailable("semantic encoders".into()))?;
    let batch = data.batch(idx)?;
    let sem = batch
        .sem
        .as_ref()
        .ok_or_else(|| Error::BackendUnavailable("semantic encoders".into()))?;
    let probs = model.teacher_forced_probs(&batch)?;
    let t = &batch.teacher;
    let mask: Vec<bool> = t.targets.iter().map(Option::is_some).collect();
    let pool = pooling_for_rows(t.batch, t.steps, &mask);
    let mut g = Graph::new();
    let p = g.constant(probs);
    let text = enc.encode_text_soft(&mut g, p, &pool)?;
    let text_pred = g.value(text).clone();
    let tau = model.tau_m_value().unwrap_or(model.cfg.cmc.tau_m_init);
    Ok(SimilaritySnapshot {
        case_ids: idx.iter().map(|&i| data.cases[i].case_id.clone()).collect(),
        frontal_pred: similarity_values(&sem.image_f, &text_pred, tau)?,
        frontal_true: similarity_values(&sem.image_f, &sem.text_true, tau)?,
        lateral_pred: similarity_values(&sem.image_l, &text_pred, tau)?,
        lateral_true: similarity_values(&sem.image_l, &sem.text_true, tau)?,
    })
}

/// One labelled embedding row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub case_id: String,
    pub view: &'static str,
    pub values: Vec<f64>,
}

/// Up to 50 test cases, sampled with the run seed; one frontal and one
/// lateral row each.
pub fn semantic_embeddings(model: &Model, data: &Dataset) -> Result<Vec<EmbeddingRow>> {
    let pool = data.indices(SplitName::Test);
    let mut r = rng::stream(model.cfg.seed, "export.sample");
    let chosen: Vec<usize> = pool.choose_multiple(&mut r, EMBEDDING_CASES).copied().collect();
    let mut rows = Vec::with_capacity(2 * chosen.len());
    for chunk in chosen.chunks(16) {
        let batch = data.batch(chunk)?;
        let (zf, zl) = model.semantic_embeddings(&batch)?;
        for (k, &i) in chunk.iter().enumerate() {
            for (view, z) in [("frontal", &zf), ("lateral", &zl)] {
                rows.push(EmbeddingRow {
                    case_id: data.cases[i].case_id.clone(),
                    view,
                    values: z.row(k).to_vec(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn embeddings_csv(rows: &[EmbeddingRow]) -> String {
    let width = rows.first().map_or(0, |r| r.values.len());
    let mut s = String::from("case_id,view");
    for j in 0..width {
        let _ = write!(s, ",z{j}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{}", r.case_id, r.view);
        for v in &r.values {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalysisKind {
    SemanticEmbeddings,
    SimilarityMatrices,
}

impl std::str::FromStr for AnalysisKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic-embeddings" => Ok(Self::SemanticEmbeddings),
            "similarity-matrices" => Ok(Self::SimilarityMatrices),
            other => Err(Error::Unknown {
                kind: "analysis",
                value: other.into(),
            }),
        }
    }
}

/// Write one analysis into `dir`; returns the files written.
pub fn export_analysis(model: &Model, data: &Dataset, kind: AnalysisKind, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    match kind {
        AnalysisKind::SemanticEmbeddings => {
            let rows = semantic_embeddings(model, data)?;
            let path = dir.join("semantic_embeddings.csv");
            std::fs::write(&path, embeddings_csv(&rows))?;
            Ok(vec![path])
        }
        AnalysisKind::SimilarityMatrices => {
            let probe = probe_indices(data, &model.cfg)
                .ok_or_else(|| Error::InvalidInput("no split holds two cases for a probe batch".into()))?;
            similarity_snapshot(model, data, &probe)?.write(dir, "similarity")
        }
    }
}
