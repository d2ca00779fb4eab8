//! Domain transfer: choose frontal, lateral or fused features as the
//! generator input, one action per study.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var, LOG_FLOOR};
use crate::nn::{Dense, ParamId, ParamStore};
use crate::rng;

pub const FRONTAL: usize = 0;
pub const LATERAL: usize = 1;
pub const FUSED: usize = 2;
pub const ACTIONS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Gumbel,
    Random,
    Argmax,
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gumbel" => Ok(Self::Gumbel),
            "random" => Ok(Self::Random),
            "argmax" => Ok(Self::Argmax),
            other => Err(Error::Unknown {
                kind: "sampling strategy",
                value: other.into(),
            }),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Gumbel => "gumbel",
            Strategy::Random => "random",
            Strategy::Argmax => "argmax",
        })
    }
}

/// Which views a case offers at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Views {
    Frontal,
    Lateral,
    Both,
}

impl FromStr for Views {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frontal" => Ok(Self::Frontal),
            "lateral" => Ok(Self::Lateral),
            "both" => Ok(Self::Both),
            other => Err(Error::Unknown {
                kind: "view selection",
                value: other.into(),
            }),
        }
    }
}

impl fmt::Display for Views {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Views::Frontal => "frontal",
            Views::Lateral => "lateral",
            Views::Both => "both",
        })
    }
}

/// W_c: mean-pool each view over regions, concatenate, affine map, softmax.
#[derive(Clone, Copy, Debug)]
pub struct ConfidenceHead {
    pub dense: Dense,
    d_model: usize,
}

impl ConfidenceHead {
    pub fn new(store: &mut ParamStore, seed: u64, d_model: usize) -> Self {
        let mut r = rng::stream(seed, "init.dot");
        Self {
            dense: Dense::new(store, &mut r, "dot.wc", 2 * d_model, ACTIONS),
            d_model,
        }
    }

    /// Action probabilities P, one row per study (batch × 3).
    pub fn confidence(&self, g: &mut Graph, store: &ParamStore, frontal: Var, lateral: Var, regions: usize) -> Result<Var> {
        let (rows, d) = g.shape(frontal);
        if g.shape(lateral) != (rows, d) || d != self.d_model || regions == 0 || rows % regions != 0 {
            return Err(Error::Dimension(format!(
                "confidence head got {rows}×{d} and {:?} with {regions} regions",
                g.shape(lateral)
            )));
        }
        let segments: Vec<(usize, usize)> = (0..rows / regions).map(|b| (b * regions, regions)).collect();
        let pf = g.segment_mean(frontal, &segments);
        let pl = g.segment_mean(lateral, &segments);
        let pooled = g.concat_cols(&[pf, pl]);
        let logits = self.dense.forward(g, store, pooled);
        Ok(g.softmax_rows(logits))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.dense.w, self.dense.b]
    }
}

/// Standard Gumbel noise, rows × k.
pub fn gumbel_noise<R: Rng>(rng: &mut R, rows: usize, k: usize) -> Mat {
    let dist = Gumbel::new(0.0, 1.0).expect("unit Gumbel is valid");
    Mat::from_shape_simple_fn((rows, k), || dist.sample(rng))
}

/// `softmax((log P + g) / τ)` row-wise, differentiable in P.
pub fn gumbel_relax(g: &mut Graph, p: Var, noise: &Mat, tau: f64) -> Var {
    let logp = g.log(p);
    let n = g.constant(noise.clone());
    let z = g.add(logp, n);
    let z = g.scale(z, 1.0 / tau);
    g.softmax_rows(z)
}

fn relax_values(p: &[f64], noise: &[f64], tau: f64) -> Vec<f64> {
    let z: Vec<f64> = p
        .iter()
        .zip(noise)
        .map(|(&pi, &gi)| (pi.max(LOG_FLOOR).ln() + gi) / tau)
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// One Gumbel-Softmax draw V for a probability vector.
pub fn gumbel_sample<R: Rng>(p: &[f64], tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::InvalidInput("Gumbel temperature must be positive".into()));
    }
    let noise = gumbel_noise(rng, 1, p.len());
    Ok(relax_values(p, noise.as_slice().expect("contiguous"), tau))
}

pub fn one_hot(k: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Draw V under a strategy, outside any graph.
pub fn sample_strategy<R: Rng>(p: &[f64], strategy: Strategy, tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    match strategy {
        Strategy::Gumbel => gumbel_sample(p, tau, rng),
        Strategy::Random => Ok(one_hot(p.len(), rng.random_range(0..p.len()))),
        Strategy::Argmax => Ok(one_hot(p.len(), argmax(p))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionSample {
    /// batch × 3
    pub p: Mat,
    /// batch × 3
    pub v: Mat,
    pub chosen: Vec<usize>,
    pub strategy: Strategy,
}

/// Sample actions for a batch inside the graph. Returns the weights that
/// carry the straight-through gradient (V for gumbel, P for argmax, a
/// constant one-hot for random) alongside the sampled values.
pub fn sample_actions<R: Rng>(
    g: &mut Graph,
    p: Var,
    strategy: Strategy,
    tau: f64,
    rng: &mut R,
) -> Result<(Var, ActionSample)> {
    let (b, k) = g.shape(p);
    let pm = g.value(p).clone();
    let (weights, v) = match strategy {
        Strategy::Gumbel => {
            if tau <= 0.0 {
                return Err(Error::InvalidInput("Gumbel temperature must be positive".into()));
            }
            let noise = gumbel_noise(rng, b, k);
            let v = gumbel_relax(g, p, &noise, tau);
            (v, g.value(v).clone())
        }
        Strategy::Argmax => {
            let mut v = Mat::zeros((b, k));
            for (i, row) in pm.rows().into_iter().enumerate() {
                v[(i, argmax(row.as_slice().expect("contiguous")))] = 1.0;
            }
            (p, v)
        }
        Strategy::Random => {
            let mut v = Mat::zeros((b, k));
            for i in 0..b {
                v[(i, rng.random_range(0..k))] = 1.0;
            }
            let c = g.constant(v.clone());
            (c, v)
        }
    };
    let chosen = v
        .rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().expect("contiguous")))
        .collect();
    Ok((
        weights,
        ActionSample {
            p: pm,
            v,
            chosen,
            strategy,
        },
    ))
}

/// F_g: the chosen action's rows, verbatim, with straight-through gradients.
pub fn select_input(g: &mut Graph, weights: Var, actions: [Var; ACTIONS], chosen: &[usize]) -> Var {
    g.select_rows(weights, &actions, chosen)
}

/// Hard selection on plain values: a copy of the action at argmax(V).
pub fn select_value(actions: [&Mat; ACTIONS], v: &[f64]) -> Mat {
    actions[argmax(v)].clone()
}

/// Inference routing: a single available view is used unconditionally;
/// with both views, the argmax of P decides.
pub fn route_inference(available: Views, p: &[f64]) -> usize {
    match available {
        Views::Frontal => FRONTAL,
        Views::Lateral => LATERAL,
        Views::Both => argmax(p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, compare, numeric_grad};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn views(b: usize, r: usize, d: usize) -> (Mat, Mat) {
        (
            Mat::from_shape_fn((b * r, d), |(i, j)| ((i * d + j) as f64 * 0.3).sin()),
            Mat::from_shape_fn((b * r, d), |(i, j)| ((i * d + j) as f64 * 0.7).cos()),
        )
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut store = ParamStore::new();
        let head = ConfidenceHead::new(&mut store, 0, 4);
        for id in head.params() {
            store.value_mut(id).fill(0.0);
        }
        let (f, l) = views(2, 3, 4);
        let mut g = Graph::new();
        let (fv, lv) = (g.constant(f), g.constant(l));
        let p = head.confidence(&mut g, &store, fv, lv, 3).unwrap();
        assert!(g.value(p).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn confidence_rows_sum_to_one_and_gradient() {
        let mut store = ParamStore::new();
        let head = ConfidenceHead::new(&mut store, 4, 4);
        let (f, l) = views(2, 3, 4);
        let mut g = Graph::new();
        let (fv, lv) = (g.constant(f.clone()), g.constant(l.clone()));
        let p = head.confidence(&mut g, &store, fv, lv, 3).unwrap();
        for row in g.value(p).rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        let w = Mat::from_shape_fn((2, 3), |(i, j)| (i + 2 * j) as f64 - 1.5);
        let check = check_params(&store, &head.params(), 1e-6, |g, s| {
            let (fv, lv) = (g.constant(f.clone()), g.constant(l.clone()));
            let p = head.confidence(g, s, fv, lv, 3).unwrap();
            let c = g.constant(w.clone());
            let m = g.mul(p, c);
            g.sum(m)
        });
        assert!(check.rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn zero_noise_unit_temperature_is_identity() {
        let p = [0.2, 0.5, 0.3];
        let v = relax_values(&p, &[0.0; 3], 1.0);
        for (a, b) in v.iter().zip(p) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn gumbel_max_frequencies_match_p() {
        let p = [0.5, 0.25, 0.25];
        for tau in [0.3, 1.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let mut counts = [0usize; 3];
            for _ in 0..10_000 {
                counts[argmax(&gumbel_sample(&p, tau, &mut rng).unwrap())] += 1;
            }
            for k in 0..3 {
                let freq = counts[k] as f64 / 10_000.0;
                assert!((freq - p[k]).abs() < 0.02, "tau {tau}: {counts:?}");
            }
        }
    }

    #[test]
    fn zero_probability_is_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = gumbel_sample(&[0.0, 1.0, 0.0], 0.3, &mut rng).unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
        assert_eq!(argmax(&v), 1);
    }

    #[test]
    fn strategies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = [0.2, 0.5, 0.3];
        assert_eq!(sample_strategy(&p, Strategy::Argmax, 0.3, &mut rng).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(
            sample_strategy(&p, Strategy::Argmax, 0.3, &mut rng).unwrap(),
            sample_strategy(&p, Strategy::Argmax, 0.3, &mut rng).unwrap()
        );
        let mut counts = [0usize; 3];
        for _ in 0..9_000 {
            counts[argmax(&sample_strategy(&p, Strategy::Random, 0.3, &mut rng).unwrap())] += 1;
        }
        for c in counts {
            assert!((c as f64 / 9_000.0 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
        assert!("softmax".parse::<Strategy>().is_err());
    }

    #[test]
    fn hard_selection_is_exact() {
        let a = [
            Mat::from_elem((2, 2), 1.0),
            Mat::from_elem((2, 2), 2.0),
            Mat::from_elem((2, 2), 3.0),
        ];
        let refs = [&a[0], &a[1], &a[2]];
        assert_eq!(select_value(refs, &[0.0, 0.0, 1.0]), a[2]);
        assert_eq!(select_value(refs, &[1.0, 0.0, 0.0]), a[0]);
        assert_eq!(select_value(refs, &[0.3, 0.36, 0.34]), a[1]);
    }

    #[test]
    fn routing() {
        let p = [0.1, 0.2, 0.7];
        assert_eq!(route_inference(Views::Frontal, &p), FRONTAL);
        assert_eq!(route_inference(Views::Lateral, &p), LATERAL);
        assert_eq!(route_inference(Views::Both, &p), FUSED);
    }

    /// The straight-through gradient w.r.t. W_c equals the gradient of the
    /// soft surrogate Σ_k V_k·a_k, which is checked numerically.
    #[test]
    fn straight_through_matches_soft_path() {
        let mut store = ParamStore::new();
        let head = ConfidenceHead::new(&mut store, 9, 4);
        let (f, l) = views(2, 3, 4);
        let fused = &f + &l;
        let target = Mat::from_shape_fn((6, 4), |(i, j)| ((i + j) as f64 * 0.9).cos());
        let noise = gumbel_noise(&mut ChaCha8Rng::seed_from_u64(3), 2, 3);
        let tau = 0.3;

        let pooled_loss = |g: &mut Graph, w: Var, b: Var, hard: bool| {
            let (fv, lv, uv) = (g.constant(f.clone()), g.constant(l.clone()), g.constant(fused.clone()));
            let segs = [(0, 3), (3, 3)];
            let pf = g.segment_mean(fv, &segs);
            let pl = g.segment_mean(lv, &segs);
            let x = g.concat_cols(&[pf, pl]);
            let logits = g.linear(x, w, b);
            let p = g.softmax_rows(logits);
            let v = gumbel_relax(g, p, &noise, tau);
            let out = if hard {
                let chosen: Vec<usize> = g
                    .value(v)
                    .rows()
                    .into_iter()
                    .map(|r| argmax(r.as_slice().unwrap()))
                    .collect();
                select_input(g, v, [fv, lv, uv], &chosen)
            } else {
                // Σ_k V[b,k]·a_k[b] with each weight broadcast over R rows
                let mut acc = None;
                for (k, a) in [fv, lv, uv].into_iter().enumerate() {
                    let col = g.slice_cols(v, k, 1);
                    let rows: Vec<usize> = (0..6).map(|i| i / 3).collect();
                    let wcol = g.gather_rows(col, &rows);
                    let ones = g.constant(Mat::ones((1, 4)));
                    let wide = g.matmul(wcol, ones);
                    let term = g.mul(wide, a);
                    acc = Some(match acc {
                        None => term,
                        Some(s) => g.add(s, term),
                    });
                }
                acc.unwrap()
            };
            let t = g.constant(target.clone());
            let m = g.mul(out, t);
            g.sum(m)
        };

        let (wi, bi) = (head.dense.w, head.dense.b);
        let mut g = Graph::new();
        let w = g.param(&store, wi);
        let b = g.param(&store, bi);
        let loss = pooled_loss(&mut g, w, b, true);
        let grads = g.backward(loss);
        let analytic: Vec<Mat> = [wi, bi]
            .iter()
            .map(|&id| grads.params().find(|(p, _)| *p == id).unwrap().1.clone())
            .collect();
        assert!(analytic[0].iter().any(|&v| v != 0.0));
        let numeric = numeric_grad(
            &[store.value(wi).clone(), store.value(bi).clone()],
            1e-6,
            |g, v| pooled_loss(g, v[0], v[1], false),
        );
        let check = compare(&analytic, &numeric);
        assert!(check.rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn low_temperature_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = [0.5, 0.25, 0.25];
        let maxes: Vec<f64> = (0..10_000)
            .map(|_| gumbel_sample(&p, 0.01, &mut rng).unwrap().into_iter().fold(0.0, f64::max))
            .collect();
        let below = maxes.iter().filter(|&&m| m < 0.99).count();
        let mean = maxes.iter().sum::<f64>() / maxes.len() as f64;
        eprintln!("tau 0.01: {below} of 10000 draws below 0.99, mean max entry {mean:.5}");
        assert!(mean > 0.99);
    }
}
