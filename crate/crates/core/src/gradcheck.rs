//! Central finite-difference gradient checks against [`Graph::backward`].
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every hand-written backward rule it checks.

use crate::graph::{Graph, Mat, Var};
use crate::nn::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, 1e-12)`
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
    pub checked: usize,
}

impl GradCheck {
    fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let diff = pairs.iter().map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let na = pairs.iter().map(|(a, _)| a * a).sum::<f64>().sqrt();
        let nn = pairs.iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
        let max_abs = pairs.iter().map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        Self {
            rel_error: diff / (na + nn).max(1e-12),
            max_abs_error: max_abs,
            analytic_norm: na,
            checked: pairs.len(),
        }
    }
}

/// Central-difference gradient of `f` with respect to each input matrix.
pub fn numeric_grad<F>(inputs: &[Mat], eps: f64, f: F) -> Vec<Mat>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |perturbed: &[Mat]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|m| g.constant(m.clone())).collect();
        let loss = f(&mut g, &vars);
        g.scalar(loss)
    };
    let mut work: Vec<Mat> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (k, m) in inputs.iter().enumerate() {
        let mut grad = Mat::zeros(m.dim());
        for (idx, &orig) in m.indexed_iter() {
            work[k][idx] = orig + eps;
            let fp = eval(&work);
            work[k][idx] = orig - eps;
            let fm = eval(&work);
            work[k][idx] = orig;
            grad[idx] = (fp - fm) / (2.0 * eps);
        }
        out.push(grad);
    }
    out
}

/// Compare analytic and numeric gradients entry by entry.
pub fn compare(analytic: &[Mat], numeric: &[Mat]) -> GradCheck {
    let pairs: Vec<(f64, f64)> = analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.iter().copied().zip(n.iter().copied()))
        .collect();
    GradCheck::from_pairs(&pairs)
}

/// Check the gradient of `f` with respect to free input matrices.
pub fn check_inputs<F>(inputs: &[Mat], eps: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);
    let analytic: Vec<Mat> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, m)| grads.wrt(v).cloned().unwrap_or_else(|| Mat::zeros(m.dim())))
        .collect();
    compare(&analytic, &numeric_grad(inputs, eps, f))
}

/// Check the gradient of `f` with respect to selected stored parameters.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], eps: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let grads = g.backward(loss);
    let grad_of = |id: ParamId| {
        grads
            .params()
            .find(|(pid, _)| *pid == id)
            .map(|(_, m)| m.clone())
            .unwrap_or_else(|| Mat::zeros(store.value(id).dim()))
    };
    let analytic: Vec<Mat> = ids.iter().map(|&id| grad_of(id)).collect();

    let mut work = store.clone();
    let mut pairs = Vec::new();
    for (k, &id) in ids.iter().enumerate() {
        let dim = store.value(id).dim();
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let orig = store.value(id)[(r, c)];
                work.value_mut(id)[(r, c)] = orig + eps;
                let mut gp = Graph::new();
                let lp = f(&mut gp, &work);
                let fp = gp.scalar(lp);
                work.value_mut(id)[(r, c)] = orig - eps;
                let mut gm = Graph::new();
                let lm = f(&mut gm, &work);
                let fm = gm.scalar(lm);
                work.value_mut(id)[(r, c)] = orig;
                pairs.push((analytic[k][(r, c)], (fp - fm) / (2.0 * eps)));
            }
        }
    }
    GradCheck::from_pairs(&pairs)
}
