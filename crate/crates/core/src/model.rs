//! The full forecaster: embeddings, both encoders and the decoding head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::cvae::{
    agent_noise, condition_vector, decode, generate, kl_rows, posterior_params, prior_params, reparameterize,
    CvaeError, CvaeNets, GaussianVars, PredictionMode, PredictionSet,
};
use crate::data::TrajectoryWindow;
use crate::encoder::{
    assemble_agent_tokens, assemble_scene_tokens, encoder_forward, AttentionScope, EncoderConfig, EncoderError,
    EncoderParams,
};
use crate::encodings::{
    embed_social, embed_spatial, project_scene, social_rows, temporal_table, EmbeddingConfig, EncodingError,
    TemporalIndex,
};
use crate::losses::{best_of_k_rows, weighted_loss_rows, BaseLoss, LossError, PenaltySchedule};
use crate::params::{Bound, Mlp, ParamStore};
use crate::tensor::{Activation, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Window(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Deterministic,
    Stochastic,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "det" | "deterministic" => Ok(Mode::Deterministic),
            "stoch" | "stochastic" => Ok(Mode::Stochastic),
            _ => Err(format!("unknown mode `{s}` (det|stoch)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Deterministic => "deterministic",
            Mode::Stochastic => "stochastic",
        })
    }
}

/// Which distribution supplies the latents of the best-of-K training term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleSource {
    #[default]
    Posterior,
    Prior,
}

impl FromStr for SampleSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "posterior" => Ok(Self::Posterior),
            "prior" => Ok(Self::Prior),
            _ => Err(format!("unknown sample source `{s}` (posterior|prior)")),
        }
    }
}

impl fmt::Display for SampleSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Posterior => "posterior",
            Self::Prior => "prior",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub t_obs: usize,
    pub t_pred: usize,
    pub emb: EmbeddingConfig,
    pub encoder: EncoderConfig,
    pub attention: AttentionScope,
    pub temporal_index: TemporalIndex,
    pub rwpe_steps: usize,
    pub eps_dist: f64,
    pub d_latent: usize,
    /// Hidden width of every Γ MLP.
    pub d_hidden: usize,
    pub d_z: usize,
    pub d_future: usize,
    pub d_y: usize,
    pub condition_generator: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Deterministic,
            t_obs: 8,
            t_pred: 12,
            emb: EmbeddingConfig::default(),
            encoder: EncoderConfig {
                d_model: 64,
                n_heads: 4,
                d_ffn: 128,
            },
            attention: AttentionScope::Joint,
            temporal_index: TemporalIndex::Literal,
            rwpe_steps: crate::graph::DEFAULT_RWPE_STEPS,
            eps_dist: crate::graph::DEFAULT_EPS_DIST,
            d_latent: crate::scene::DEFAULT_LATENT_DIM,
            d_hidden: 64,
            d_z: 32,
            d_future: 64,
            d_y: 64,
            condition_generator: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.emb.validate()?;
        self.encoder.validate()?;
        let d = self.encoder.d_model;
        if self.emb.agent_token_dim() != d || self.emb.scene_token_dim() != d {
            return Err(ModelError::Config(format!(
                "token widths (agent {}, scene {}) must equal d_model {d}",
                self.emb.agent_token_dim(),
                self.emb.scene_token_dim()
            )));
        }
        if self.t_obs < 1 || self.t_pred < 1 {
            return Err(ModelError::Config("t_obs and t_pred must be >= 1".into()));
        }
        if !(1..=crate::graph::MAX_RWPE_STEPS).contains(&self.rwpe_steps) {
            return Err(ModelError::Config(format!("rwpe_steps must be in 1..=32, got {}", self.rwpe_steps)));
        }
        if !(self.eps_dist > 0.0) {
            return Err(ModelError::Config("eps_dist must be positive".into()));
        }
        for (name, v) in [
            ("d_latent", self.d_latent),
            ("d_hidden", self.d_hidden),
            ("d_z", self.d_z),
            ("d_future", self.d_future),
            ("d_y", self.d_y),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn coord_dim(&self) -> usize {
        self.emb.coord_dim
    }

    /// Width of the per-agent condition vector.
    pub fn d_condition(&self) -> usize {
        2 * self.encoder.d_model
    }

    pub fn out_dim(&self) -> usize {
        self.t_pred * self.coord_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Deterministic { decoder: Mlp },
    Stochastic(CvaeNets),
}

/// Stochastic-mode training knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StochasticObjective {
    pub k_train: usize,
    pub kl_coeff: f64,
    pub source: SampleSource,
}

impl Default for StochasticObjective {
    fn default() -> Self {
        Self {
            k_train: 5,
            kl_coeff: 1.0,
            source: SampleSource::Posterior,
        }
    }
}

/// Trajectory loss settings shared by both modes.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub schedule: PenaltySchedule,
    pub base: BaseLoss,
    pub stochastic: StochasticObjective,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    spatial: Mlp,
    social: Mlp,
    scene: Mlp,
    scene_encoder: EncoderParams,
    agent_encoder: EncoderParams,
    head: Head,
}

/// Scalar loss plus the per-agent terms it averages.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub trajectory: Var,
    pub kl: Option<Var>,
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let h = cfg.d_hidden;
        let (relu, id) = (Activation::Relu, Activation::Identity);
        let c = cfg.coord_dim();
        let spatial = Mlp::new(&mut store, "spatial", &[c, h, cfg.emb.d_spatial], relu, id, rng);
        let social = Mlp::new(&mut store, "social", &[cfg.rwpe_steps, h, cfg.emb.d_social], relu, id, rng);
        let scene = Mlp::new(&mut store, "scene", &[cfg.d_latent, h, cfg.emb.d_scene], relu, id, rng);
        let scene_encoder = EncoderParams::new(&mut store, "scene_encoder", cfg.encoder, rng);
        let agent_encoder = EncoderParams::new(&mut store, "agent_encoder", cfg.encoder, rng);
        let dc = cfg.d_condition();
        let head = match cfg.mode {
            Mode::Deterministic => Head::Deterministic {
                decoder: Mlp::new(&mut store, "decoder", &[dc, h, cfg.out_dim()], relu, id, rng),
            },
            Mode::Stochastic => {
                let gen_in = if cfg.condition_generator { dc + cfg.d_z } else { cfg.d_z };
                Head::Stochastic(CvaeNets {
                    prior: Mlp::new(&mut store, "prior", &[dc, h, 2 * cfg.d_z], relu, id, rng),
                    future: Mlp::new(&mut store, "future", &[cfg.out_dim(), h, cfg.d_future], relu, id, rng),
                    posterior: Mlp::new(&mut store, "posterior", &[dc + cfg.d_future, h, 2 * cfg.d_z], relu, id, rng),
                    generator: Mlp::new(&mut store, "generator", &[gen_in, h, cfg.d_y], relu, id, rng),
                    decoder: Mlp::new(&mut store, "decoder_stoch", &[cfg.d_y, h, cfg.out_dim()], relu, id, rng),
                    d_z: cfg.d_z,
                    condition_generator: cfg.condition_generator,
                })
            }
        };
        Ok(Self {
            cfg,
            store,
            spatial,
            social,
            scene,
            scene_encoder,
            agent_encoder,
            head,
        })
    }

    pub fn mode(&self) -> Mode {
        self.cfg.mode
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn encoders(&self) -> (&EncoderParams, &EncoderParams) {
        (&self.scene_encoder, &self.agent_encoder)
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.store.numel()
    }

    fn check_window(&self, w: &TrajectoryWindow) -> Result<()> {
        if w.coord_dim() != self.cfg.coord_dim() {
            return Err(ModelError::Window(format!(
                "window has coord_dim {}, model expects {}",
                w.coord_dim(),
                self.cfg.coord_dim()
            )));
        }
        if w.t_obs() != self.cfg.t_obs {
            return Err(ModelError::Window(format!(
                "window observes {} frames, model expects {}",
                w.t_obs(),
                self.cfg.t_obs
            )));
        }
        if w.future.is_some() && w.t_pred() != self.cfg.t_pred {
            return Err(ModelError::Window(format!(
                "window predicts {} frames, model expects {}",
                w.t_pred(),
                self.cfg.t_pred
            )));
        }
        Ok(())
    }

    /// Per-agent condition vectors `[A × 2·d_model]`.
    pub fn condition(&self, tape: &mut Tape, bound: &Bound, w: &TrajectoryWindow) -> Result<Var> {
        self.check_window(w)?;
        let cfg = &self.cfg;
        let t = cfg.t_obs;
        let local_frames: Vec<i64> = (0..t as i64).collect();
        let temporal = temporal_table(t, cfg.emb.d_temporal, cfg.temporal_index);

        let spatial = embed_spatial(tape, &w.obs, &self.spatial.bind(bound))?;
        let rw = social_rows(&w.obs, cfg.rwpe_steps, cfg.eps_dist)?;
        let social = embed_social(tape, &rw, &self.social.bind(bound))?;
        let tokens = assemble_agent_tokens(tape, spatial, &temporal, social, &w.agent_ids, &local_frames)?;
        let mask = match cfg.attention {
            AttentionScope::Joint => None,
            AttentionScope::PerAgent => Some(tokens.per_agent_mask()),
        };
        let agent_emb = encoder_forward(tape, bound, &self.agent_encoder, tokens.tokens, mask.as_ref())?;

        let latents = match &w.scene_latents {
            Some(l) => l.clone(),
            None => Tensor::zeros(&[t, cfg.d_latent]),
        };
        if latents.dims2() != Some((t, cfg.d_latent)) {
            return Err(ModelError::Window(format!(
                "scene latents have shape {:?}, model expects [{t} × {}]",
                latents.shape(),
                cfg.d_latent
            )));
        }
        let proj = project_scene(tape, &latents, t, &self.scene.bind(bound))?;
        let scene_tokens = assemble_scene_tokens(tape, proj, &temporal, &local_frames)?;
        let scene_emb = encoder_forward(tape, bound, &self.scene_encoder, scene_tokens.tokens, None)?;

        Ok(condition_vector(tape, scene_emb, agent_emb, w.n_agents())?)
    }

    /// Training objective for one window. `noise` holds `k_train` tensors of
    /// shape `[A × d_z]` in stochastic mode and is ignored otherwise.
    pub fn loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        w: &TrajectoryWindow,
        obj: &Objective,
        noise: &[Tensor],
    ) -> Result<LossVars> {
        let gt_rows = w
            .future_rows()
            .ok_or_else(|| ModelError::Window("training window has no future".into()))?;
        let c = self.condition(tape, bound, w)?;
        let last = w.last_observed();
        let gt = tape.constant(gt_rows);
        let cd = self.cfg.coord_dim();
        match &self.head {
            Head::Deterministic { decoder } => {
                let pred = decode(tape, c, &decoder.bind(bound), &last, self.cfg.t_pred)?;
                let rows = weighted_loss_rows(tape, pred, gt, &obj.schedule, obj.base, cd)?;
                let total = tape.mean(rows);
                Ok(LossVars {
                    total,
                    trajectory: total,
                    kl: None,
                })
            }
            Head::Stochastic(nets) => {
                let so = obj.stochastic;
                if noise.len() != so.k_train || so.k_train == 0 {
                    return Err(ModelError::Config(format!(
                        "stochastic objective needs {} noise draws, got {}",
                        so.k_train,
                        noise.len()
                    )));
                }
                let prior = prior_params(tape, c, &nets.prior.bind(bound), nets.d_z)?;
                let q = posterior_params(tape, c, gt, &nets.future.bind(bound), &nets.posterior.bind(bound), nets.d_z)?;
                let source: GaussianVars = match so.source {
                    SampleSource::Posterior => q,
                    SampleSource::Prior => prior,
                };
                let gen = nets.generator.bind(bound);
                let dec = nets.decoder.bind(bound);
                let mut per_sample = Vec::with_capacity(noise.len());
                for eps in noise {
                    let z = reparameterize(tape, source, eps)?;
                    let y = generate(tape, c, z, &gen, nets.condition_generator)?;
                    let pred = decode(tape, y, &dec, &last, self.cfg.t_pred)?;
                    per_sample.push(weighted_loss_rows(tape, pred, gt, &obj.schedule, obj.base, cd)?);
                }
                let best = best_of_k_rows(tape, &per_sample)?;
                let kl = kl_rows(tape, q, prior)?;
                let scaled = tape.scale(kl, so.kl_coeff);
                let rows = tape.add(best, scaled)?;
                let total = tape.mean(rows);
                let trajectory = tape.mean(best);
                let kl = tape.mean(kl);
                Ok(LossVars {
                    total,
                    trajectory,
                    kl: Some(kl),
                })
            }
        }
    }

    /// Point forecast `[A × T_pred·C]` in window coordinates: the decoder
    /// output, or the decode of the prior mean in stochastic mode.
    pub fn predict_point(&self, w: &TrajectoryWindow) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let c = self.condition(&mut tape, &bound, w)?;
        let last = w.last_observed();
        let pred = match &self.head {
            Head::Deterministic { decoder } => decode(&mut tape, c, &decoder.bind(&bound), &last, self.cfg.t_pred)?,
            Head::Stochastic(nets) => {
                let prior = prior_params(&mut tape, c, &nets.prior.bind(&bound), nets.d_z)?;
                let y = generate(&mut tape, c, prior.mu, &nets.generator.bind(&bound), nets.condition_generator)?;
                decode(&mut tape, y, &nets.decoder.bind(&bound), &last, self.cfg.t_pred)?
            }
        };
        Ok(tape.value(pred).clone())
    }

    /// `k` forecasts per agent. Stochastic noise is drawn per agent id from
    /// `seed`; deterministic mode only accepts `k == 1`.
    pub fn predict(&self, w: &TrajectoryWindow, k: usize, seed: u64) -> Result<PredictionSet> {
        let (a, t, cd) = (w.n_agents(), self.cfg.t_pred, self.cfg.coord_dim());
        match &self.head {
            Head::Deterministic { .. } => {
                if k != 1 {
                    return Err(ModelError::Config(format!(
                        "deterministic model produces one forecast, {k} requested"
                    )));
                }
                let p = self.predict_point(w)?;
                Ok(PredictionSet {
                    mode: PredictionMode::Deterministic,
                    trajectories: p.reshape(&[1, a, t, cd])?,
                    latents_used: None,
                })
            }
            Head::Stochastic(nets) => {
                if k == 0 {
                    return Err(ModelError::Config("k must be >= 1".into()));
                }
                let mut tape = Tape::new();
                let bound = self.store.bind_frozen(&mut tape);
                let c = self.condition(&mut tape, &bound, w)?;
                let noise = agent_noise(seed, &w.agent_ids, k, nets.d_z);
                Ok(nets.sample_trajectories(&mut tape, &bound, c, &w.last_observed(), t, &noise)?)
            }
        }
    }

    /// FLOPs for one forward pass over a window with `a` agents. Every
    /// linear map costs `2·in·out` per row; each attention block adds
    /// `2·N²·d` for scores and again for the weighted sum.
    pub fn estimate_flops(&self, a: usize) -> usize {
        let s = &self.store;
        let t = self.cfg.t_obs;
        let n = a * t;
        let mut f = n * (self.spatial.flops_per_row(s) + self.social.flops_per_row(s));
        f += t * self.scene.flops_per_row(s);
        f += self.agent_encoder.flops(n) + self.scene_encoder.flops(t);
        f += a * match &self.head {
            Head::Deterministic { decoder } => decoder.flops_per_row(s),
            Head::Stochastic(nets) => {
                nets.prior.flops_per_row(s) + nets.generator.flops_per_row(s) + nets.decoder.flops_per_row(s)
            }
        };
        f
    }
}
