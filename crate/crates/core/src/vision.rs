//! Region features, the per-view projection heads φ_f / φ_l, and additive
//! view fusion.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::ImageRef;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::nn::{normal, Dense, ParamId, ParamStore};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Frontal,
    Lateral,
    Fused,
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Frontal => "frontal",
            View::Lateral => "lateral",
            View::Fused => "fused",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures {
    /// R × d_feat
    pub grid: Mat,
    pub view: View,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewEmbedding {
    /// R × d_model
    pub grid: Mat,
    pub view: View,
}

/// Source of region-level features for one image.
pub trait Backbone: Send + Sync {
    fn name(&self) -> &'static str;
    fn regions(&self) -> usize;
    fn d_feat(&self) -> usize;
    fn extract(&self, image: &ImageRef, view: View) -> Result<RegionFeatures>;
}

/// Lifts a synthetic latent vector to an R × d_feat grid with a fixed
/// view-specific linear map, then adds noise seeded by the input itself.
#[derive(Clone, Debug)]
pub struct SyntheticBackbone {
    seed: u64,
    regions: usize,
    d_feat: usize,
    latent_dim: usize,
    noise: f64,
    lift_frontal: Mat,
    lift_lateral: Mat,
}

impl SyntheticBackbone {
    pub fn new(seed: u64, latent_dim: usize, regions: usize, d_feat: usize, noise: f64) -> Self {
        let std = 1.0 / (latent_dim.max(1) as f64).sqrt();
        let lift_frontal = normal(&mut rng::stream(seed, "vision.lift.frontal"), latent_dim, regions * d_feat, std);
        let lift_lateral = normal(&mut rng::stream(seed, "vision.lift.lateral"), latent_dim, regions * d_feat, std);
        Self {
            seed,
            regions,
            d_feat,
            latent_dim,
            noise,
            lift_frontal,
            lift_lateral,
        }
    }
}

fn latent_key(latent: &[f64], view: View) -> String {
    let mut h: u64 = rng::label_hash(&view.to_string());
    for v in latent {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("vision.noise.{h:016x}")
}

impl Backbone for SyntheticBackbone {
    fn name(&self) -> &'static str {
        "synthetic"
    }

    fn regions(&self) -> usize {
        self.regions
    }

    fn d_feat(&self) -> usize {
        self.d_feat
    }

    fn extract(&self, image: &ImageRef, view: View) -> Result<RegionFeatures> {
        let latent = match image {
            ImageRef::Synthetic { latent, .. } => latent,
            ImageRef::Path(p) => {
                return Err(Error::BackendMismatch(format!(
                    "synthetic backbone cannot read image file {p}"
                )))
            }
        };
        if latent.len() != self.latent_dim {
            return Err(Error::Dimension(format!(
                "latent has {} entries, backbone expects {}",
                latent.len(),
                self.latent_dim
            )));
        }
        let lift = match view {
            View::Frontal => &self.lift_frontal,
            View::Lateral => &self.lift_lateral,
            View::Fused => return Err(Error::InvalidInput("cannot extract features for a fused view".into())),
        };
        let z = ndarray::ArrayView1::from(latent.as_slice());
        let flat = z.dot(lift);
        let noise = normal(
            &mut rng::stream(self.seed, &latent_key(latent, view)),
            self.regions,
            self.d_feat,
            self.noise,
        );
        let grid = flat
            .into_shape_with_order((self.regions, self.d_feat))
            .expect("lift width is regions * d_feat")
            + noise;
        Ok(RegionFeatures { grid, view })
    }
}

/// Build the backbone named by `vision.backend`. Only `synthetic` ships in
/// this build; `pretrained-cnn` is a plug-in point for external weights.
pub fn backbone_from_name(
    name: &str,
    seed: u64,
    latent_dim: usize,
    regions: usize,
    d_feat: usize,
    noise: f64,
) -> Result<Box<dyn Backbone>> {
    match name {
        "synthetic" => Ok(Box::new(SyntheticBackbone::new(seed, latent_dim, regions, d_feat, noise))),
        "pretrained-cnn" => Err(Error::BackendUnavailable(name.into())),
        other => Err(Error::Unknown {
            kind: "vision backend",
            value: other.into(),
        }),
    }
}

/// Stack of affine layers with ELU after each one.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub layers: Vec<Dense>,
    d_in: usize,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, d_in: usize, d_out: usize, depth: usize) -> Self {
        let mut r = rng::stream(seed, &format!("init.{name}"));
        let layers = (0..depth.max(1))
            .map(|i| {
                let fan_in = if i == 0 { d_in } else { d_out };
                Dense::new(store, &mut r, &format!("{name}.{i}"), fan_in, d_out)
            })
            .collect();
        Self { layers, d_in }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.shape(x).1 != self.d_in {
            return Err(Error::Dimension(format!(
                "projection head expects width {}, got {}",
                self.d_in,
                g.shape(x).1
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            let z = layer.forward(g, store, h);
            h = g.elu(z);
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

/// Independent heads φ_f and φ_l.
#[derive(Clone, Debug)]
pub struct ViewProjections {
    pub frontal: ProjectionHead,
    pub lateral: ProjectionHead,
}

impl ViewProjections {
    pub fn new(store: &mut ParamStore, seed: u64, d_feat: usize, d_model: usize, depth: usize) -> Self {
        Self {
            frontal: ProjectionHead::new(store, seed, "phi_f", d_feat, d_model, depth),
            lateral: ProjectionHead::new(store, seed, "phi_l", d_feat, d_model, depth),
        }
    }

    pub fn project(&self, g: &mut Graph, store: &ParamStore, x: Var, view: View) -> Result<Var> {
        match view {
            View::Frontal => self.frontal.forward(g, store, x),
            View::Lateral => self.lateral.forward(g, store, x),
            View::Fused => Err(Error::InvalidInput("no projection head for a fused view".into())),
        }
    }

    /// Project one view's region features outside any training graph.
    pub fn project_view(&self, store: &ParamStore, f: &RegionFeatures) -> Result<ViewEmbedding> {
        let mut g = Graph::new();
        let x = g.constant(f.grid.clone());
        let y = self.project(&mut g, store, x, f.view)?;
        Ok(ViewEmbedding {
            grid: g.value(y).clone(),
            view: f.view,
        })
    }
}

/// Element-wise sum of two view embeddings; width is unchanged.
pub fn fuse_views(a: &ViewEmbedding, b: &ViewEmbedding) -> Result<ViewEmbedding> {
    if a.grid.dim() != b.grid.dim() {
        return Err(Error::Dimension(format!(
            "cannot fuse {:?} with {:?}",
            a.grid.dim(),
            b.grid.dim()
        )));
    }
    Ok(ViewEmbedding {
        grid: &a.grid + &b.grid,
        view: View::Fused,
    })
}
