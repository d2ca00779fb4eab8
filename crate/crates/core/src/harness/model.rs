//! The assembled report generator: view projections, optional concat
//! adapter, transformer, and the optional MvCo, DoT and CMC pieces.

use ndarray::Axis;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::cmc::{cmc_loss, pooling_for_rows, CmcTerms, SemanticEncoders, TAU_MAX, TAU_MIN};
use crate::corpus::Vocabulary;
use crate::dot::{route_inference, sample_actions, select_input, ActionSample, ConfidenceHead, Views, ACTIONS};
use crate::error::{Error, Result};
use crate::generator::{DecoderOutput, Generator, GeneratorConfig, TeacherBatch};
use crate::graph::{Graph, Mat, Var};
use crate::harness::config::{CmcMode, MvcoSource, TrainConfig, ViewInput};
use crate::harness::data::Batch;
use crate::mvco::{mvco_loss, SemanticHead};
use crate::nn::{Dense, ParamId, ParamStore};
use crate::rng;
use crate::vision::{View, ViewProjections};

pub struct Model {
    pub cfg: TrainConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub heads: ViewProjections,
    pub adapter: Option<Dense>,
    pub generator: Generator,
    pub psi: Option<SemanticHead>,
    pub confidence: Option<ConfidenceHead>,
    pub tau_m: Option<ParamId>,
}

/// Graph handles for the generator input of one batch.
pub struct GenInput {
    pub frontal: Var,
    pub lateral: Var,
    pub memory: Var,
    pub actions: Option<ActionSample>,
}

pub struct AuxLosses {
    pub mvco: Option<Var>,
    pub cmc: Option<CmcTerms>,
}

impl AuxLosses {
    /// `base + λ_mvco·L_MvCo + λ_cmc·L_CMC` over the present terms.
    pub fn add_to(&self, g: &mut Graph, base: Var, cfg: &TrainConfig) -> Var {
        let mut total = base;
        if let Some(l) = self.mvco {
            let w = g.scale(l, cfg.mvco.weight);
            total = g.add(total, w);
        }
        if let Some(t) = &self.cmc {
            let w = g.scale(t.loss, cfg.cmc.weight);
            total = g.add(total, w);
        }
        total
    }
}

pub struct StepLosses {
    pub total: Var,
    pub ce: Var,
    pub mvco: Option<Var>,
    pub cmc: Option<CmcTerms>,
    pub actions: Option<ActionSample>,
}

/// Inference-time memory for a batch plus the route each item took.
pub struct Routed {
    /// (B·R) × d
    pub memory: Mat,
    /// Action index per item (DoT models only).
    pub routes: Option<Vec<usize>>,
    /// Confidence rows, B × 3 (DoT models with both views only).
    pub confidence: Option<Mat>,
}

impl Model {
    /// Shared parameters are created first, optional components after, each
    /// from its own seeded stream, so toggling one component never moves
    /// another component's initial values.
    pub fn new(cfg: &TrainConfig, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let d = cfg.model.d_model;
        let mut store = ParamStore::new();
        let heads = ViewProjections::new(&mut store, seed, cfg.vision.d_feat, d, cfg.vision.head_depth);
        let adapter = (cfg.model.view_input == ViewInput::Concat && !cfg.dot.enabled).then(|| {
            let mut r = rng::stream(seed, "init.adapter");
            Dense::new(&mut store, &mut r, "adapter", 2 * d, d)
        });
        let generator = Generator::new(
            &mut store,
            seed,
            GeneratorConfig {
                vocab_size: vocab.len(),
                d_model: d,
                heads: cfg.model.heads,
                enc_layers: cfg.model.enc_layers,
                dec_layers: cfg.model.dec_layers,
                d_ff: cfg.model.d_ff,
                regions: cfg.vision.regions,
                max_len: cfg.data.max_len,
            },
        )?;
        let psi = cfg.mvco.enabled.then(|| {
            let d_in = match cfg.mvco.source {
                MvcoSource::Decoder => 2 * d,
                MvcoSource::Encoder => d,
            };
            SemanticHead::new(&mut store, seed, d_in, cfg.mvco.d_proj)
        });
        let confidence = cfg.dot.enabled.then(|| ConfidenceHead::new(&mut store, seed, d));
        let tau_m = cfg
            .cmc
            .enabled
            .then(|| store.insert("cmc.tau_m", Mat::from_elem((1, 1), cfg.cmc.tau_m_init)));
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            store,
            heads,
            adapter,
            generator,
            psi,
            confidence,
            tau_m,
        })
    }

    /// Hex SHA-256 of the architecture key; checkpoints carry it.
    pub fn arch_hash(&self) -> String {
        arch_hash(&self.cfg, self.vocab.len())
    }

    pub fn regions(&self) -> usize {
        self.cfg.vision.regions
    }

    /// Project both views and build the generator memory. DoT models sample
    /// an action per item from `rng`.
    pub fn gen_input<R: Rng>(&self, g: &mut Graph, feat_f: &Mat, feat_l: &Mat, rng: &mut R) -> Result<GenInput> {
        let xf = g.constant(feat_f.clone());
        let xl = g.constant(feat_l.clone());
        let frontal = self.heads.project(g, &self.store, xf, View::Frontal)?;
        let lateral = self.heads.project(g, &self.store, xl, View::Lateral)?;
        let (input, actions) = if let Some(head) = &self.confidence {
            let p = head.confidence(g, &self.store, frontal, lateral, self.regions())?;
            let (w, sample) = sample_actions(g, p, self.cfg.dot.strategy, self.cfg.dot.tau_s, rng)?;
            let fused = g.add(frontal, lateral);
            let x = select_input(g, w, [frontal, lateral, fused], &sample.chosen);
            (x, Some(sample))
        } else {
            (self.combine(g, frontal, lateral), None)
        };
        let memory = self.generator.encode(g, &self.store, input)?;
        Ok(GenInput {
            frontal,
            lateral,
            memory,
            actions,
        })
    }

    fn combine(&self, g: &mut Graph, frontal: Var, lateral: Var) -> Var {
        match &self.adapter {
            Some(a) => {
                let x = g.concat_cols(&[frontal, lateral]);
                a.forward(g, &self.store, x)
            }
            None => g.add(frontal, lateral),
        }
    }

    /// ψ embeddings of each view for MvCo.
    pub fn view_semantics(&self, g: &mut Graph, view_input: Var, teacher: &TeacherBatch) -> Result<Var> {
        let psi = self
            .psi
            .as_ref()
            .ok_or_else(|| Error::Config("model has no semantic head".into()))?;
        let memory = self.generator.encode(g, &self.store, view_input)?;
        match self.cfg.mvco.source {
            MvcoSource::Decoder => {
                let out = self.generator.decode_teacher_forced(g, &self.store, memory, teacher)?;
                psi.project(g, &self.store, out.context, out.hidden)
            }
            MvcoSource::Encoder => {
                let r = self.regions();
                let segments: Vec<(usize, usize)> = (0..teacher.batch).map(|b| (b * r, r)).collect();
                let pooled = g.segment_mean(memory, &segments);
                psi.forward(g, &self.store, pooled)
            }
        }
    }

    /// Soft cross-modal consistency for a decoded batch.
    pub fn cmc_terms(
        &self,
        g: &mut Graph,
        out: &DecoderOutput,
        batch: &Batch,
        enc: &SemanticEncoders,
    ) -> Result<CmcTerms> {
        let tau_id = self
            .tau_m
            .ok_or_else(|| Error::Config("model has no consistency temperature".into()))?;
        let sem = batch
            .sem
            .as_ref()
            .ok_or_else(|| Error::BackendUnavailable("semantic encoders".into()))?;
        let t = &batch.teacher;
        let probs = g.softmax_rows(out.logits);
        let mask: Vec<bool> = t.targets.iter().map(Option::is_some).collect();
        let pool = pooling_for_rows(t.batch, t.steps, &mask);
        let text_pred = enc.encode_text_soft(g, probs, &pool)?;
        let text_true = g.constant(sem.text_true.clone());
        let img_f = g.constant(sem.image_f.clone());
        let img_l = g.constant(sem.image_l.clone());
        let tau = g.param(&self.store, tau_id);
        cmc_loss(
            g,
            Some(img_f),
            Some(img_l),
            text_pred,
            text_true,
            tau,
            self.cfg.cmc.variant,
            self.cfg.cmc.kl_order,
        )
    }

    /// The full pre-training objective for one batch.
    pub fn training_losses<R: Rng>(
        &self,
        g: &mut Graph,
        batch: &Batch,
        enc: Option<&SemanticEncoders>,
        rng: &mut R,
    ) -> Result<StepLosses> {
        let gi = self.gen_input(g, &batch.feat_f, &batch.feat_l, rng)?;
        let out = self
            .generator
            .decode_teacher_forced(g, &self.store, gi.memory, &batch.teacher)?;
        let ce = self.generator.cross_entropy(g, &out, &batch.teacher);
        let aux = self.aux_losses(g, &gi, &out, batch, enc)?;
        let total = aux.add_to(g, ce, &self.cfg);
        Ok(StepLosses {
            total,
            ce,
            mvco: aux.mvco,
            cmc: aux.cmc,
            actions: gi.actions,
        })
    }

    /// MvCo and soft CMC terms for enabled modules; `out` is the generation
    /// branch decoded on the reference report.
    pub fn aux_losses(
        &self,
        g: &mut Graph,
        gi: &GenInput,
        out: &DecoderOutput,
        batch: &Batch,
        enc: Option<&SemanticEncoders>,
    ) -> Result<AuxLosses> {
        let mut mvco = None;
        if self.cfg.mvco.enabled {
            let zf = self.view_semantics(g, gi.frontal, &batch.teacher)?;
            let zl = self.view_semantics(g, gi.lateral, &batch.teacher)?;
            mvco = Some(mvco_loss(g, zf, zl, self.cfg.mvco.tau_c)?);
        }
        let mut cmc = None;
        if self.cfg.cmc.enabled && self.cfg.cmc.mode == CmcMode::Soft {
            let enc = enc.ok_or_else(|| Error::BackendUnavailable("semantic encoders".into()))?;
            cmc = Some(self.cmc_terms(g, out, batch, enc)?);
        }
        Ok(AuxLosses { mvco, cmc })
    }

    /// Teacher-forced token distributions for a batch, with the inference
    /// routing for both views (no sampling).
    pub fn teacher_forced_probs(&self, batch: &Batch) -> Result<Mat> {
        let routed = self.route(&batch.feat_f, &batch.feat_l, Views::Both)?;
        let mut g = Graph::new();
        let mem = g.constant(routed.memory);
        let out = self
            .generator
            .decode_teacher_forced(&mut g, &self.store, mem, &batch.teacher)?;
        let p = g.softmax_rows(out.logits);
        Ok(g.value(p).clone())
    }

    /// Keep τ_m inside its admissible range after an update.
    pub fn clamp_temperatures(&mut self) {
        if let Some(id) = self.tau_m {
            self.store.value_mut(id).mapv_inplace(|t| t.clamp(TAU_MIN, TAU_MAX));
        }
    }

    pub fn tau_m_value(&self) -> Option<f64> {
        self.tau_m.map(|id| self.store.value(id)[(0, 0)])
    }

    /// Memory for inference with only `views` available. Non-DoT models see
    /// a zero embedding in place of a missing view; DoT models route to the
    /// available view or, with both, to argmax of the confidence.
    pub fn route(&self, feat_f: &Mat, feat_l: &Mat, views: Views) -> Result<Routed> {
        let r = self.regions();
        let mut g = Graph::new();
        let xf = g.constant(feat_f.clone());
        let xl = g.constant(feat_l.clone());
        let mut frontal = self.heads.project(&mut g, &self.store, xf, View::Frontal)?;
        let mut lateral = self.heads.project(&mut g, &self.store, xl, View::Lateral)?;
        let batch = feat_f.nrows() / r;
        let (input, routes, confidence) = if let Some(head) = &self.confidence {
            let conf = if views == Views::Both {
                let p = head.confidence(&mut g, &self.store, frontal, lateral, r)?;
                Some(g.value(p).clone())
            } else {
                None
            };
            let routes: Vec<usize> = (0..batch)
                .map(|b| {
                    let p = conf.as_ref().map(|c| c.row(b).to_vec()).unwrap_or(vec![0.0; ACTIONS]);
                    route_inference(views, &p)
                })
                .collect();
            let fused = g.add(frontal, lateral);
            let actions = [frontal, lateral, fused];
            let mut value = Mat::zeros(g.value(frontal).dim());
            for (b, &a) in routes.iter().enumerate() {
                let src = g.value(actions[a]).slice(ndarray::s![b * r..(b + 1) * r, ..]).to_owned();
                value.slice_mut(ndarray::s![b * r..(b + 1) * r, ..]).assign(&src);
            }
            (g.constant(value), Some(routes), conf)
        } else {
            let zeros = Mat::zeros(g.value(frontal).dim());
            match views {
                Views::Frontal => lateral = g.constant(zeros),
                Views::Lateral => frontal = g.constant(zeros),
                Views::Both => {}
            }
            (self.combine(&mut g, frontal, lateral), None, None)
        };
        let memory = self.generator.encode(&mut g, &self.store, input)?;
        Ok(Routed {
            memory: g.value(memory).clone(),
            routes,
            confidence,
        })
    }

    /// Beam-decode each item of a routed batch; returns token ids per item
    /// (BOS excluded, EOS included when emitted).
    pub fn generate(&self, routed: &Routed, beam: usize) -> Result<Vec<Vec<usize>>> {
        let r = self.regions();
        let batch = routed.memory.nrows() / r;
        if beam <= 1 {
            return self.generator.greedy(&self.store, &routed.memory);
        }
        (0..batch)
            .map(|b| {
                let mem = routed.memory.slice_axis(Axis(0), (b * r..(b + 1) * r).into()).to_owned();
                self.generator.beam(&self.store, &mem, beam)
            })
            .collect()
    }

    /// Semantic embeddings of each view for a batch, computed with the
    /// reference report teacher-forced: ψ outputs when the model has a
    /// semantic head, `concat(c, h)` otherwise.
    pub fn semantic_embeddings(&self, batch: &Batch) -> Result<(Mat, Mat)> {
        let mut g = Graph::new();
        let xf = g.constant(batch.feat_f.clone());
        let xl = g.constant(batch.feat_l.clone());
        let f = self.heads.project(&mut g, &self.store, xf, View::Frontal)?;
        let l = self.heads.project(&mut g, &self.store, xl, View::Lateral)?;
        let embed = |g: &mut Graph, v: Var| -> Result<Var> {
            if self.psi.is_some() {
                return self.view_semantics(g, v, &batch.teacher);
            }
            let memory = self.generator.encode(g, &self.store, v)?;
            let out = self.generator.decode_teacher_forced(g, &self.store, memory, &batch.teacher)?;
            Ok(g.concat_cols(&[out.context, out.hidden]))
        };
        let zf = embed(&mut g, f)?;
        let zl = embed(&mut g, l)?;
        Ok((g.value(zf).clone(), g.value(zl).clone()))
    }
}

pub fn arch_hash(cfg: &TrainConfig, vocab_size: usize) -> String {
    let digest = Sha256::digest(cfg.architecture_key(vocab_size).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
