//! Cross-modal consistency: frozen image/text semantic encoders, softmax
//! similarity matrices, and the KL / JS / MSE / CL consistency losses.
//!
//! The generated report reaches the text encoder as a token-probability
//! matrix ("soft decode"): its embedding is `Σ_q probs_q · T`, so the loss
//! is differentiable in the generator logits. Feeding one-hot rows gives the
//! hard-token embedding exactly.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::corpus::{Finding, ImageRef, Vocabulary, RESERVED};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::nn::normal;
use crate::rng;
use crate::vision::View;

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Kl,
    Js,
    Mse,
    Cl,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(Self::Kl),
            "js" => Ok(Self::Js),
            "mse" => Ok(Self::Mse),
            "cl" => Ok(Self::Cl),
            other => Err(Error::Unknown {
                kind: "consistency variant",
                value: other.into(),
            }),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Kl => "kl",
            Variant::Js => "js",
            Variant::Mse => "mse",
            Variant::Cl => "cl",
        })
    }
}

/// Argument order of the KL term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlOrder {
    /// KL(S_true ‖ S_pred)
    TargetPred,
    /// KL(S_pred ‖ S_true)
    PredTarget,
}

impl FromStr for KlOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target_pred" => Ok(Self::TargetPred),
            "pred_target" => Ok(Self::PredTarget),
            other => Err(Error::Unknown {
                kind: "KL order",
                value: other.into(),
            }),
        }
    }
}

impl fmt::Display for KlOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlOrder::TargetPred => "target_pred",
            KlOrder::PredTarget => "pred_target",
        })
    }
}

/// Frozen synthetic semantic encoders.
///
/// Image: `base_view + Σ_{f ∈ findings} M_f`. Text: `base_text + Σ_q T[w_q]`
/// where a finding's keyword row of `T` is `M_f` and every other ordinary
/// token gets a small fixed vector. Nothing here is a trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEncoders {
    pub d_sem: usize,
    image_base: [Array1<f64>; 2],
    findings: Mat,
    text_base: Array1<f64>,
    tokens: Mat,
}

impl SemanticEncoders {
    pub fn synthetic(seed: u64, vocab: &Vocabulary, catalogue: &[Finding], d_sem: usize) -> Self {
        let std = 1.0 / (d_sem as f64).sqrt();
        let mut r = rng::stream(seed, "cmc.encoders");
        let findings = normal(&mut r, catalogue.len(), d_sem, std);
        let shared = normal(&mut r, 1, d_sem, std).row(0).to_owned();
        let offset = |r: &mut rand_chacha::ChaCha8Rng| &shared + &normal(r, 1, d_sem, 0.3 * std).row(0);
        let image_base = [offset(&mut r), offset(&mut r)];
        let text_base = shared.clone();
        let mut tokens = Mat::zeros((vocab.len(), d_sem));
        for (id, tok) in vocab.tokens().iter().enumerate() {
            if RESERVED.contains(&tok.as_str()) {
                continue;
            }
            let row = match catalogue.iter().position(|f| &f.keyword == tok) {
                Some(f) => findings.row(f).to_owned(),
                None => normal(&mut rng::stream(seed, &format!("cmc.token.{tok}")), 1, d_sem, 0.05 * std)
                    .row(0)
                    .to_owned(),
            };
            tokens.row_mut(id).assign(&row);
        }
        Self {
            d_sem,
            image_base,
            findings,
            text_base,
            tokens,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn encode_image(&self, image: &ImageRef, view: View) -> Result<Array1<f64>> {
        let ImageRef::Synthetic { findings, .. } = image else {
            return Err(Error::BackendMismatch(
                "synthetic semantic encoder needs synthetic image references".into(),
            ));
        };
        let base = match view {
            View::Frontal => &self.image_base[0],
            View::Lateral => &self.image_base[1],
            View::Fused => return Err(Error::InvalidInput("no semantic encoder for fused views".into())),
        };
        let mut v = base.clone();
        for &f in findings {
            if f >= self.findings.nrows() {
                return Err(Error::UnresolvableRef(format!("finding index {f}")));
            }
            v += &self.findings.row(f);
        }
        Ok(v)
    }

    /// Hard-token text embeddings, one row per sequence.
    pub fn encode_text_ids(&self, seqs: &[Vec<usize>]) -> Result<Mat> {
        let total: usize = seqs.iter().map(Vec::len).sum();
        let mut rows = Vec::with_capacity(total);
        for s in seqs {
            if s.is_empty() {
                return Err(Error::InvalidInput("cannot embed an empty report".into()));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= self.vocab_size()) {
                return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary")));
            }
            rows.extend_from_slice(s);
        }
        let gathered = self.tokens.select(ndarray::Axis(0), &rows);
        let pool = pooling_matrix(seqs.iter().map(Vec::len), total);
        Ok(pool.dot(&gathered) + &self.text_base)
    }

    /// Soft text embeddings: `pool · (probs · T) + base`. `pool` is the
    /// batch × rows 0/1 matrix from [`pooling_matrix`].
    pub fn encode_text_soft(&self, g: &mut Graph, probs: Var, pool: &Mat) -> Result<Var> {
        let (rows, v) = g.shape(probs);
        if v != self.vocab_size() || pool.ncols() != rows {
            return Err(Error::Dimension(format!(
                "soft text input {rows}×{v} does not fit pool {:?} / vocabulary {}",
                pool.dim(),
                self.vocab_size()
            )));
        }
        let table = g.constant(self.tokens.clone());
        let mixed = g.matmul(probs, table);
        let pool = g.constant(pool.clone());
        let summed = g.matmul(pool, mixed);
        let base = g.constant(self.text_base.clone().insert_axis(ndarray::Axis(0)));
        Ok(g.add_row(summed, base))
    }

    /// Text embedding of one token-distribution matrix (rows sum to 1).
    pub fn encode_text_distribution(&self, probs: &Mat) -> Result<Array1<f64>> {
        if probs.nrows() == 0 {
            return Err(Error::InvalidInput("cannot embed an empty report".into()));
        }
        let mut g = Graph::new();
        let p = g.constant(probs.clone());
        let pool = pooling_matrix([probs.nrows()], probs.nrows());
        let e = self.encode_text_soft(&mut g, p, &pool)?;
        Ok(g.value(e).row(0).to_owned())
    }
}

/// batch × total 0/1 matrix summing each item's consecutive rows.
pub fn pooling_matrix<I: IntoIterator<Item = usize>>(lens: I, total: usize) -> Mat {
    let lens: Vec<usize> = lens.into_iter().collect();
    let mut pool = Mat::zeros((lens.len(), total));
    let mut start = 0;
    for (b, &n) in lens.iter().enumerate() {
        for r in start..start + n {
            pool[(b, r)] = 1.0;
        }
        start += n;
    }
    pool
}

/// Pooling over the non-padding rows of a padded batch layout.
pub fn pooling_for_rows(batch: usize, steps: usize, row_mask: &[bool]) -> Mat {
    let mut pool = Mat::zeros((batch, batch * steps));
    for (i, &keep) in row_mask.iter().enumerate() {
        if keep {
            pool[(i / steps, i)] = 1.0;
        }
    }
    pool
}

/// Row-softmax of cosine similarities over temperature: entry (i, j) is
/// `softmax_j(cos(rows_i, cols_j) / τ)`.
pub fn similarity_matrix(g: &mut Graph, rows: Var, cols: Var, tau: Var) -> Result<Var> {
    let (n, d) = g.shape(rows);
    if g.shape(cols) != (n, d) {
        return Err(Error::Dimension(format!(
            "similarity needs equal shapes, got {:?} and {:?}",
            (n, d),
            g.shape(cols)
        )));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!("similarity matrix needs N >= 2, got {n}")));
    }
    if g.scalar(tau) <= 0.0 {
        return Err(Error::InvalidInput("temperature must be positive".into()));
    }
    let a = g.row_normalize(rows);
    let b = g.row_normalize(cols);
    let cos = g.matmul_t(a, b);
    let z = g.div_scalar(cos, tau);
    Ok(g.softmax_rows(z))
}

pub fn similarity_values(rows: &Mat, cols: &Mat, tau: f64) -> Result<Mat> {
    let mut g = Graph::new();
    let (r, c, t) = (
        g.constant(rows.clone()),
        g.constant(cols.clone()),
        g.constant(Mat::from_elem((1, 1), tau)),
    );
    let s = similarity_matrix(&mut g, r, c, t)?;
    Ok(g.value(s).clone())
}

/// Mean over rows of `Σ_j p_j (log p_j − log q_j)`.
fn kl_rows(g: &mut Graph, p: Var, q: Var) -> Var {
    let n = g.shape(p).0 as f64;
    let lp = g.log(p);
    let lq = g.log(q);
    let diff = g.sub(lp, lq);
    let terms = g.mul(p, diff);
    let s = g.sum(terms);
    g.scale(s, 1.0 / n)
}

/// Consistency between a predicted and a target similarity matrix. The
/// target should already be detached.
pub fn divergence(g: &mut Graph, pred: Var, target: Var, variant: Variant, order: KlOrder) -> Result<Var> {
    let shape = g.shape(pred);
    if g.shape(target) != shape {
        return Err(Error::Dimension(format!(
            "matrices differ in shape: {shape:?} vs {:?}",
            g.shape(target)
        )));
    }
    Ok(match variant {
        Variant::Kl => match order {
            KlOrder::TargetPred => kl_rows(g, target, pred),
            KlOrder::PredTarget => kl_rows(g, pred, target),
        },
        Variant::Js => {
            let sum = g.add(pred, target);
            let m = g.scale(sum, 0.5);
            let a = kl_rows(g, pred, m);
            let b = kl_rows(g, target, m);
            let s = g.add(a, b);
            g.scale(s, 0.5)
        }
        Variant::Mse => {
            let d = g.sub(pred, target);
            let sq = g.square(d);
            g.mean(sq)
        }
        Variant::Cl => {
            let n = shape.0;
            if shape.1 != n {
                return Err(Error::Dimension("contrastive variant needs a square matrix".into()));
            }
            // −mean_i log S[i,i]
            let mut eye = Mat::zeros((n, n));
            eye.diag_mut().fill(1.0);
            let eye = g.constant(eye);
            let logs = g.log(pred);
            let masked = g.mul(logs, eye);
            let total = g.sum(masked);
            g.scale(total, -1.0 / n as f64)
        }
    })
}

pub fn divergence_values(pred: &Mat, target: &Mat, variant: Variant, order: KlOrder) -> Result<f64> {
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    let d = divergence(&mut g, p, t, variant, order)?;
    Ok(g.scalar(d))
}

/// The four matrices of one view, plus the view's consistency term
/// `½[D(v2t) + D(t2v)]`.
#[derive(Clone, Copy, Debug)]
pub struct ViewTerm {
    pub pred_v2t: Var,
    pub true_v2t: Var,
    pub pred_t2v: Var,
    pub true_t2v: Var,
    pub loss: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn view_consistency(
    g: &mut Graph,
    images: Var,
    text_pred: Var,
    text_true: Var,
    tau: Var,
    variant: Variant,
    order: KlOrder,
) -> Result<ViewTerm> {
    let pred_v2t = similarity_matrix(g, images, text_pred, tau)?;
    let pred_t2v = similarity_matrix(g, text_pred, images, tau)?;
    let t1 = similarity_matrix(g, images, text_true, tau)?;
    let t2 = similarity_matrix(g, text_true, images, tau)?;
    let true_v2t = g.detach(t1);
    let true_t2v = g.detach(t2);
    let a = divergence(g, pred_v2t, true_v2t, variant, order)?;
    let b = divergence(g, pred_t2v, true_t2v, variant, order)?;
    let s = g.add(a, b);
    let loss = g.scale(s, 0.5);
    Ok(ViewTerm {
        pred_v2t,
        true_v2t,
        pred_t2v,
        true_t2v,
        loss,
    })
}

/// `L_CMC = L^F + L^L`. A missing view contributes nothing (with a
/// warning); both missing is an error.
pub struct CmcTerms {
    pub frontal: Option<ViewTerm>,
    pub lateral: Option<ViewTerm>,
    pub loss: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn cmc_loss(
    g: &mut Graph,
    frontal: Option<Var>,
    lateral: Option<Var>,
    text_pred: Var,
    text_true: Var,
    tau: Var,
    variant: Variant,
    order: KlOrder,
) -> Result<CmcTerms> {
    let frontal = frontal
        .map(|img| view_consistency(g, img, text_pred, text_true, tau, variant, order))
        .transpose()?;
    let lateral = lateral
        .map(|img| view_consistency(g, img, text_pred, text_true, tau, variant, order))
        .transpose()?;
    let loss = match (&frontal, &lateral) {
        (Some(f), Some(l)) => g.add(f.loss, l.loss),
        (Some(t), None) | (None, Some(t)) => {
            log::warn!("cross-modal consistency computed on a single view");
            t.loss
        }
        (None, None) => return Err(Error::InvalidInput("no image view available for CMC".into())),
    };
    Ok(CmcTerms { frontal, lateral, loss })
}
