//! Named parameter storage, initialisation, and the Adam optimiser.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::graph::{Gradients, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Flat, insertion-ordered parameter table.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn to_archive(&self) -> BTreeMap<String, StoredMatrix> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), StoredMatrix::from(v)))
            .collect()
    }

    /// Overwrite values from an archive. Every stored name must already
    /// exist with the same shape.
    pub fn load_archive(&mut self, archive: &BTreeMap<String, StoredMatrix>) -> Result<(), String> {
        if archive.len() != self.values.len() {
            return Err(format!(
                "archive holds {} parameters, model expects {}",
                archive.len(),
                self.values.len()
            ));
        }
        for (name, stored) in archive {
            let id = self
                .id(name)
                .ok_or_else(|| format!("unknown parameter {name}"))?;
            let m = stored.to_mat()?;
            if m.dim() != self.values[id.0].dim() {
                return Err(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    m.dim(),
                    self.values[id.0].dim()
                ));
            }
            self.values[id.0] = m;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StoredMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Mat> for StoredMatrix {
    fn from(m: &Mat) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().copied().collect(),
        }
    }
}

impl StoredMatrix {
    pub fn to_mat(&self) -> Result<Mat, String> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| e.to_string())
    }
}

/// Glorot-uniform initialisation.
pub fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit))
}

pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Handles to a dense layer's weight (in×out) and bias (1×out).
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.insert(&format!("{name}.w"), xavier(rng, fan_in, fan_out));
        let b = store.insert(&format!("{name}.b"), Mat::zeros((1, fan_out)));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut crate::graph::Graph, store: &ParamStore, x: crate::graph::Var) -> crate::graph::Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 5.0,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Self {
            cfg,
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. Parameters listed in `frozen` are left untouched.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, frozen: &[ParamId]) -> f64 {
        self.t += 1;
        let mut pairs: Vec<(ParamId, &Mat)> = grads
            .params()
            .filter(|(id, _)| !frozen.contains(id))
            .collect();
        pairs.sort_by_key(|(id, _)| *id);
        let norm = pairs
            .iter()
            .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (id, g) in pairs {
            let m = self.m[id.0].get_or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v[id.0].get_or_insert_with(|| Mat::zeros(g.dim()));
            let p = &mut store.values[id.0];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &gr| {
                    let gr = gr * clip;
                    *m = b1 * *m + (1.0 - b1) * gr;
                    *v = b2 * *v + (1.0 - b2) * gr * gr;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
                });
        }
        norm
    }
}

/// Linear warm-up followed by inverse-square-root decay; peaks at `base`
/// when `step == warmup`. Steps count from 1.
pub fn warmup_inv_sqrt(base: f64, warmup: usize, step: usize) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    base * (step / warmup).min((warmup / step).sqrt())
}

/// Cosine annealing with warm restarts every `period` epochs (epochs count
/// from 0).
pub fn cosine_restart(base: f64, period: usize, epoch: usize) -> f64 {
    let period = period.max(1);
    let phase = (epoch % period) as f64 / period as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * phase).cos())
}
