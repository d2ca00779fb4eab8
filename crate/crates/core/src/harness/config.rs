//! Run configuration: a TOML document of sections, two built-in profiles
//! and dotted-key overrides (`mvco.tau_c=0.2`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cmc::{KlOrder, Variant};
use crate::dot::Strategy;
use crate::error::{Error, Result};
use crate::metrics::BleuMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Toy,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Unknown {
                kind: "profile",
                value: other.into(),
            }),
        }
    }
}

/// How the two views become one generator input when DoT is off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewInput {
    /// Feature-axis concatenation followed by a 2d → d adapter.
    Concat,
    /// Element-wise sum.
    Fusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MvcoSource {
    /// ψ(concat(c, h)) from the decoder.
    Decoder,
    /// ψ(mean-pooled encoder memory).
    Encoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmcMode {
    /// Differentiable loss through the token-probability matrix.
    Soft,
    /// Consistency penalty folded into the RL reward instead.
    Reward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Line-delimited manifest; when absent a synthetic corpus is generated.
    pub manifest: Option<PathBuf>,
    pub n_cases: usize,
    pub n_findings: usize,
    pub latent_dim: usize,
    pub latent_noise: f64,
    pub prevalence: f64,
    pub min_count: usize,
    pub max_len: usize,
    pub split: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    pub backend: String,
    pub regions: usize,
    pub d_feat: usize,
    pub feature_noise: f64,
    pub head_depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub view_input: ViewInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MvcoConfig {
    pub enabled: bool,
    pub weight: f64,
    pub tau_c: f64,
    pub d_proj: usize,
    pub source: MvcoSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DotConfig {
    pub enabled: bool,
    pub strategy: Strategy,
    pub tau_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmcConfig {
    pub enabled: bool,
    pub weight: f64,
    pub variant: Variant,
    pub mode: CmcMode,
    pub kl_order: KlOrder,
    pub tau_m_init: f64,
    pub d_sem: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    /// Write `epoch_NNN.json` every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub cosine_period: usize,
    pub keep_aux_losses: bool,
    pub reward_weights: [f64; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub beam_size: usize,
    pub bleu_mode: BleuMode,
    /// Cases scored per split during training-time evaluation (0: all).
    pub max_cases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub profile: Profile,
    pub data: DataConfig,
    pub vision: VisionConfig,
    pub model: ModelConfig,
    pub mvco: MvcoConfig,
    pub dot: DotConfig,
    pub cmc: CmcConfig,
    pub pretrain: PretrainConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
}

impl TrainConfig {
    /// Desk-scale defaults: 500 synthetic cases, d_model 64, batch 8.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            profile: Profile::Toy,
            data: DataConfig {
                manifest: None,
                n_cases: 500,
                n_findings: 6,
                latent_dim: 16,
                latent_noise: 0.1,
                prevalence: 0.3,
                min_count: 5,
                max_len: 60,
                split: [0.7, 0.1, 0.2],
            },
            vision: VisionConfig {
                backend: "synthetic".into(),
                regions: 4,
                d_feat: 64,
                feature_noise: 0.01,
                head_depth: 1,
            },
            model: ModelConfig {
                d_model: 64,
                heads: 4,
                enc_layers: 1,
                dec_layers: 1,
                d_ff: 128,
                view_input: ViewInput::Fusion,
            },
            mvco: MvcoConfig {
                enabled: true,
                weight: 1.0,
                tau_c: 0.1,
                d_proj: 64,
                source: MvcoSource::Decoder,
            },
            dot: DotConfig {
                enabled: true,
                strategy: Strategy::Gumbel,
                tau_s: 0.3,
            },
            cmc: CmcConfig {
                enabled: true,
                weight: 1.0,
                variant: Variant::Kl,
                mode: CmcMode::Soft,
                kl_order: KlOrder::TargetPred,
                tau_m_init: 0.07,
                d_sem: 32,
            },
            pretrain: PretrainConfig {
                batch_size: 8,
                epochs: 60,
                lr: 1e-3,
                warmup_steps: 200,
                clip_norm: 5.0,
                checkpoint_every: 0,
            },
            rl: RlConfig {
                batch_size: 8,
                epochs: 3,
                lr: 1e-5,
                cosine_period: 15,
                keep_aux_losses: false,
                reward_weights: crate::metrics::DEFAULT_REWARD_WEIGHTS,
            },
            eval: EvalConfig {
                beam_size: 2,
                bleu_mode: BleuMode::Corpus,
                max_cases: 0,
            },
        }
    }

    /// The published hyper-parameters, for real data and a real backbone.
    pub fn paper() -> Self {
        let mut c = Self::toy();
        c.profile = Profile::Paper;
        c.vision.d_feat = 2048;
        c.vision.regions = 49;
        c.model = ModelConfig {
            d_model: 1024,
            heads: 8,
            enc_layers: 4,
            dec_layers: 4,
            d_ff: 2048,
            view_input: ViewInput::Fusion,
        };
        c.mvco.d_proj = 1024;
        c.cmc.d_sem = 512;
        c.pretrain = PretrainConfig {
            batch_size: 6,
            epochs: 60,
            lr: 1e-4,
            warmup_steps: 10_000,
            clip_norm: 5.0,
            checkpoint_every: 1,
        };
        c.rl = RlConfig {
            batch_size: 2,
            epochs: 60,
            lr: 1e-5,
            cosine_period: 15,
            keep_aux_losses: false,
            reward_weights: crate::metrics::DEFAULT_REWARD_WEIGHTS,
        };
        c
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Toy => Self::toy(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Profile defaults, then the file (if any), then `key=value` overrides.
    pub fn load(profile: Profile, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            merge(&mut table, doc);
        }
        for kv in overrides {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_overrides(&self, overrides: &[&str]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for kv in overrides {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("pretrain.lr", self.pretrain.lr),
            ("rl.lr", self.rl.lr),
            ("mvco.tau_c", self.mvco.tau_c),
            ("dot.tau_s", self.dot.tau_s),
            ("cmc.tau_m_init", self.cmc.tau_m_init),
        ] {
            if v.is_nan() || v <= 0.0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.mvco.weight < 0.0 || self.cmc.weight < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if !self.model.d_model.is_multiple_of(self.model.heads) {
            return bad("model.d_model must be divisible by model.heads".into());
        }
        if self.pretrain.batch_size < 2 && (self.mvco.enabled || self.cmc.enabled) {
            return bad("contrastive and consistency losses need pretrain.batch_size >= 2".into());
        }
        if self.dot.enabled && self.model.view_input != ViewInput::Fusion {
            return bad("dot.enabled selects among frontal/lateral/fused inputs; set model.view_input = \"fusion\"".into());
        }
        if self.eval.beam_size == 0 || self.pretrain.batch_size == 0 || self.rl.batch_size == 0 {
            return bad("beam and batch sizes must be at least 1".into());
        }
        let s: f64 = self.data.split.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return bad("data.split must sum to 1".into());
        }
        Ok(())
    }

    /// Keys that fix parameter shapes; hashed into checkpoints.
    pub fn architecture_key(&self, vocab_size: usize) -> String {
        format!(
            "vocab={vocab_size};regions={};d_feat={};head_depth={};d_model={};heads={};enc={};dec={};d_ff={};max_len={};view_input={:?};mvco={}:{}:{:?};dot={};cmc={}",
            self.vision.regions,
            self.vision.d_feat,
            self.vision.head_depth,
            self.model.d_model,
            self.model.heads,
            self.model.enc_layers,
            self.model.dec_layers,
            self.model.d_ff,
            self.data.max_len,
            self.model.view_input,
            self.mvco.enabled,
            self.mvco.d_proj,
            self.mvco.source,
            self.dot.enabled,
            self.cmc.enabled,
        )
    }

    pub fn output_dir_name(&self) -> String {
        format!("seed{}", self.seed)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        cur = match cur.get_mut(p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config section `{p}` in `{key}`"))),
        };
    }
    if !cur.contains_key(last) && last != "manifest" {
        return Err(Error::Config(format!("unknown config key `{key}`")));
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
