//! Everything a run needs from the corpus, computed once: the split, the
//! vocabulary, cached backbone features, framed targets and frozen
//! semantic embeddings.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Axis};

use crate::cmc::SemanticEncoders;
use crate::dot::Views;
use crate::corpus::{
    finding_catalogue, read_manifest_file, split_dataset, write_manifest_file, DatasetSplit, Finding, SplitName,
    StudyCase, SyntheticSpec, Vocabulary,
};
use crate::error::{Error, Result};
use crate::generator::TeacherBatch;
use crate::graph::Mat;
use crate::harness::config::TrainConfig;
use crate::vision::{backbone_from_name, View};

pub struct Dataset {
    pub cases: Vec<StudyCase>,
    pub index: HashMap<String, usize>,
    pub split: DatasetSplit,
    pub vocab: Vocabulary,
    pub catalogue: Vec<Finding>,
    /// Per case: [frontal, lateral] region features; `None` where the
    /// backbone could not resolve the view.
    pub features: Vec<[Option<Mat>; 2]>,
    /// Per case: `BOS w… EOS`, truncated to the configured length.
    pub framed: Vec<Vec<usize>>,
    pub encoders: Option<SemanticEncoders>,
    pub dropped_empty: usize,
}

/// Stacked inputs for a batch of cases.
pub struct Batch {
    pub idx: Vec<usize>,
    /// (B·R) × d_feat
    pub feat_f: Mat,
    pub feat_l: Mat,
    pub teacher: TeacherBatch,
    /// B × d_sem, present when semantic encoders are.
    pub sem: Option<SemanticBatch>,
}

pub struct SemanticBatch {
    pub image_f: Mat,
    pub image_l: Mat,
    pub text_true: Mat,
}

fn load_cases(cfg: &TrainConfig) -> Result<(Vec<StudyCase>, usize)> {
    match &cfg.data.manifest {
        Some(path) => {
            let ing = read_manifest_file(path)?;
            if ing.dropped_empty > 0 {
                log::warn!("{} cases dropped: report empty after normalisation", ing.dropped_empty);
            }
            Ok((ing.cases, ing.dropped_empty))
        }
        None => {
            let spec = SyntheticSpec {
                n_cases: cfg.data.n_cases,
                n_findings: cfg.data.n_findings,
                seed: cfg.seed,
                latent_dim: cfg.data.latent_dim,
                noise: cfg.data.latent_noise,
                prevalence: cfg.data.prevalence,
            };
            Ok((spec.generate()?, 0))
        }
    }
}

impl Dataset {
    /// Build from config; the vocabulary comes from the training split.
    pub fn prepare(cfg: &TrainConfig) -> Result<Self> {
        Self::build(cfg, None)
    }

    /// Build from config with a fixed vocabulary (e.g. from a checkpoint).
    pub fn with_vocab(cfg: &TrainConfig, vocab: Vocabulary) -> Result<Self> {
        Self::build(cfg, Some(vocab))
    }

    fn build(cfg: &TrainConfig, vocab: Option<Vocabulary>) -> Result<Self> {
        let (cases, dropped_empty) = load_cases(cfg)?;
        let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
        let [a, b, c] = cfg.data.split;
        let split = split_dataset(&ids, (a, b, c), cfg.seed)?;
        let index: HashMap<String, usize> = ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
        let vocab = match vocab {
            Some(v) => v,
            None => {
                let train: Vec<&Vec<String>> = split.train.iter().map(|id| &cases[index[id]].report).collect();
                let owned: Vec<Vec<String>> = train.into_iter().cloned().collect();
                Vocabulary::build(&owned, cfg.data.min_count)?
            }
        };
        let catalogue = finding_catalogue(cfg.data.n_findings);
        let backbone = backbone_from_name(
            &cfg.vision.backend,
            cfg.seed,
            cfg.data.latent_dim,
            cfg.vision.regions,
            cfg.vision.d_feat,
            cfg.vision.feature_noise,
        )?;
        let mut features = Vec::with_capacity(cases.len());
        let mut unresolved = 0;
        for case in &cases {
            let mut pair = [None, None];
            for (slot, (r, v)) in [(&case.frontal_ref, View::Frontal), (&case.lateral_ref, View::Lateral)]
                .into_iter()
                .enumerate()
            {
                match backbone.extract(r, v) {
                    Ok(f) => pair[slot] = Some(f.grid),
                    Err(e) => {
                        unresolved += 1;
                        log::debug!("{} {v}: {e}", case.case_id);
                    }
                }
            }
            features.push(pair);
        }
        if unresolved > 0 {
            log::warn!("{unresolved} views could not be resolved by the backbone");
        }
        let framed = cases
            .iter()
            .map(|c| vocab.frame_report(&c.report, cfg.data.max_len))
            .collect();
        let synthetic = cases
            .iter()
            .all(|c| matches!(c.frontal_ref, crate::corpus::ImageRef::Synthetic { .. }));
        let encoders = synthetic.then(|| SemanticEncoders::synthetic(cfg.seed, &vocab, &catalogue, cfg.cmc.d_sem));
        if cfg.cmc.enabled && encoders.is_none() {
            return Err(Error::BackendUnavailable(
                "pretrained-clip (cross-modal consistency on non-synthetic data)".into(),
            ));
        }
        Ok(Self {
            cases,
            index,
            split,
            vocab,
            catalogue,
            features,
            framed,
            encoders,
            dropped_empty,
        })
    }

    /// Case indices of a split, in split order, restricted to cases where
    /// every requested view resolved. Returns the indices and the number of
    /// cases skipped.
    pub fn available(&self, which: SplitName, views: Views) -> (Vec<usize>, usize) {
        let need: &[usize] = match views {
            Views::Frontal => &[0],
            Views::Lateral => &[1],
            Views::Both => &[0, 1],
        };
        let all: Vec<usize> = self.split.ids(which).iter().map(|id| self.index[id]).collect();
        let keep: Vec<usize> = all
            .iter()
            .copied()
            .filter(|&i| need.iter().all(|&v| self.features[i][v].is_some()))
            .collect();
        let skipped = all.len() - keep.len();
        (keep, skipped)
    }

    /// Training cases: those with both views.
    pub fn indices(&self, which: SplitName) -> Vec<usize> {
        self.available(which, Views::Both).0
    }

    /// Stacked (B·R) × d_feat features for both views. A missing view is
    /// filled with zeros when `allow_missing`, an error otherwise.
    pub fn stacked(&self, idx: &[usize], allow_missing: bool) -> Result<(Mat, Mat)> {
        let shape = self
            .features
            .iter()
            .flat_map(|p| p.iter().flatten())
            .map(|m| m.dim())
            .next()
            .ok_or_else(|| Error::UnresolvableRef("no resolvable view in the corpus".into()))?;
        let zeros = Mat::zeros(shape);
        let mut out = [Vec::with_capacity(idx.len()), Vec::with_capacity(idx.len())];
        for &i in idx {
            for (v, slot) in out.iter_mut().enumerate() {
                match &self.features[i][v] {
                    Some(m) => slot.push(m.view()),
                    None if allow_missing => slot.push(zeros.view()),
                    None => return Err(Error::UnresolvableRef(self.cases[i].case_id.clone())),
                }
            }
        }
        let [f, l] = out;
        let cat = |v: Vec<ndarray::ArrayView2<f64>>| {
            ndarray::concatenate(Axis(0), &v).map_err(|e| Error::Dimension(e.to_string()))
        };
        Ok((cat(f)?, cat(l)?))
    }

    /// Frozen image embeddings (B × d_sem) for one view.
    pub fn image_semantics(&self, idx: &[usize], view: View) -> Result<Mat> {
        let enc = self
            .encoders
            .as_ref()
            .ok_or_else(|| Error::BackendUnavailable("semantic encoders".into()))?;
        let rows: Vec<Array1<f64>> = idx
            .iter()
            .map(|&i| {
                let c = &self.cases[i];
                let r = if view == View::Frontal { &c.frontal_ref } else { &c.lateral_ref };
                enc.encode_image(r, view)
            })
            .collect::<Result<_>>()?;
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::stack(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let (feat_f, feat_l) = self.stacked(idx, false)?;
        let framed: Vec<Vec<usize>> = idx.iter().map(|&i| self.framed[i].clone()).collect();
        let teacher = TeacherBatch::new(&framed)?;
        let sem = match &self.encoders {
            Some(enc) => {
                let targets: Vec<Vec<usize>> = framed.iter().map(|s| s[1..].to_vec()).collect();
                Some(SemanticBatch {
                    image_f: self.image_semantics(idx, View::Frontal)?,
                    image_l: self.image_semantics(idx, View::Lateral)?,
                    text_true: enc.encode_text_ids(&targets)?,
                })
            }
            None => None,
        };
        Ok(Batch {
            idx: idx.to_vec(),
            feat_f,
            feat_l,
            teacher,
            sem,
        })
    }

    /// Write manifest, split and vocabulary into `dir`.
    pub fn write_prepared(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_manifest_file(&dir.join("manifest.jsonl"), &self.cases)?;
        std::fs::write(dir.join("split.json"), serde_json::to_string_pretty(&self.split)?)?;
        std::fs::write(dir.join("vocab.json"), serde_json::to_string_pretty(&self.vocab)?)?;
        Ok(())
    }
}
