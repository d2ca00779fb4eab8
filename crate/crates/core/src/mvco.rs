//! Multi-view contrastive branch: the shared semantic head ψ and the
//! symmetric NT-Xent loss over frontal/lateral projections.

use ndarray::ArrayView1;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::nn::{Dense, ParamId, ParamStore};
use crate::rng;

/// ψ: affine → ReLU → affine. One instance serves both views.
#[derive(Clone, Copy, Debug)]
pub struct SemanticHead {
    pub first: Dense,
    pub second: Dense,
    d_in: usize,
}

impl SemanticHead {
    pub fn new(store: &mut ParamStore, seed: u64, d_in: usize, d_proj: usize) -> Self {
        let mut r = rng::stream(seed, "init.psi");
        Self {
            first: Dense::new(store, &mut r, "psi.0", d_in, d_proj),
            second: Dense::new(store, &mut r, "psi.1", d_proj, d_proj),
            d_in,
        }
    }

    /// Project rows of `x` (already `concat(c, h)` or any other source of
    /// width `d_in`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.shape(x).1 != self.d_in {
            return Err(Error::Dimension(format!(
                "semantic head expects width {}, got {}",
                self.d_in,
                g.shape(x).1
            )));
        }
        let h = self.first.forward(g, store, x);
        let h = g.relu(h);
        Ok(self.second.forward(g, store, h))
    }

    /// ψ(concat(c, h)) for batch-aligned context and hidden rows.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, c: Var, h: Var) -> Result<Var> {
        if g.shape(c).0 != g.shape(h).0 {
            return Err(Error::Dimension("context and hidden row counts differ".into()));
        }
        let x = g.concat_cols(&[c, h]);
        self.forward(g, store, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.first.w, self.first.b, self.second.w, self.second.b]
    }
}

/// Cosine similarity; 0 (with a warning) when either vector is all zeros.
pub fn cosine_sim(m: ArrayView1<f64>, n: ArrayView1<f64>) -> f64 {
    let nm = m.dot(&m).sqrt();
    let nn = n.dot(&n).sqrt();
    if nm == 0.0 || nn == 0.0 {
        log::warn!("cosine similarity of a zero vector treated as 0");
        return 0.0;
    }
    m.dot(&n) / (nm * nn)
}

/// Symmetric NT-Xent. Row `i` of `frontal` and row `i` of `lateral` are the
/// positive pair; every other projection in the 2N pool is a negative.
/// Averaged over all 2N anchors.
pub fn mvco_loss(g: &mut Graph, frontal: Var, lateral: Var, tau: f64) -> Result<Var> {
    let (n, d) = g.shape(frontal);
    if g.shape(lateral) != (n, d) {
        return Err(Error::Dimension("frontal and lateral projections differ in shape".into()));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!("contrastive loss needs N >= 2 cases, got {n}")));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidInput("temperature must be positive".into()));
    }
    let pool = g.concat_rows(&[frontal, lateral]);
    let unit = g.row_normalize(pool);
    let sim = g.matmul_t(unit, unit);
    let logits = g.scale(sim, 1.0 / tau);
    let mut mask = Mat::zeros((2 * n, 2 * n));
    mask.diag_mut().fill(f64::NEG_INFINITY);
    let mask = g.constant(mask);
    let logits = g.add(logits, mask);
    let targets: Vec<Option<usize>> = (0..2 * n).map(|i| Some((i + n) % (2 * n))).collect();
    Ok(g.cross_entropy(logits, &targets))
}
