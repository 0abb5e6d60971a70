//! `key = value` training configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{AugmentConfig, ColumnOrder, LatentSource, Layout, WindowConfig};
use crate::encoder::{AttentionScope, EncoderConfig};
use crate::encodings::{EmbeddingConfig, TemporalIndex};
use crate::losses::{BaseLoss, PenaltyKind, PenaltySchedule};
use crate::metrics::ArbVariant;
use crate::model::{Mode, ModelConfig, Objective, SampleSource, StochasticObjective};

use super::optim::AdamWConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{}{msg}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub line: Option<usize>,
    pub msg: String,
}

impl ConfigError {
    fn new(msg: impl Into<String>) -> Self {
        Self {
            line: None,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam: AdamWConfig,
    pub grad_accum: usize,
    pub k_eval: usize,
    pub k_train: usize,
    pub kl_coeff: f64,
    pub sample_source: SampleSource,
    pub penalty: PenaltyKind,
    pub alpha: f64,
    pub beta: f64,
    pub base_loss: BaseLoss,
    pub seed: u64,
    pub stride: usize,
    pub resample_gaps: bool,
    pub layout: Layout,
    pub column_order: ColumnOrder,
    pub latent_source: LatentSource,
    pub data: Option<PathBuf>,
    pub held_out: Option<String>,
    pub val_fraction: f64,
    pub val_every: usize,
    pub augment: bool,
    pub augment_probability: f64,
    pub augment_rotate: Option<bool>,
    pub augment_sigma: f64,
    pub arb_variant: ArbVariant,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 200,
            lr_max: 1e-3,
            lr_min: 1e-5,
            adam: AdamWConfig::default(),
            grad_accum: 1,
            k_eval: 20,
            k_train: 5,
            kl_coeff: 1.0,
            sample_source: SampleSource::Posterior,
            penalty: PenaltyKind::Parabolic,
            alpha: 2.0,
            beta: 1.0,
            base_loss: BaseLoss::SmoothL1,
            seed: 0,
            stride: 1,
            resample_gaps: false,
            layout: Layout::FrameAgentXy,
            column_order: ColumnOrder::Xy,
            latent_source: LatentSource::Zero,
            data: None,
            held_out: None,
            val_fraction: 0.0,
            val_every: 1,
            augment: true,
            augment_probability: 0.5,
            augment_rotate: None,
            augment_sigma: 1.0,
            arb_variant: ArbVariant::MeanOfRmse,
            out: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError::new(format!("invalid value `{value}` for `{key}`")))
}

fn parse_with<T>(key: &str, value: &str, f: impl FnOnce(&str) -> Result<T, String>) -> Result<T, ConfigError> {
    f(value).map_err(|e| ConfigError::new(format!("`{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::new(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        match key {
            "mode" => m.mode = parse_with(key, value, str::parse)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr_max" | "lr" => self.lr_max = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "weight_decay" => self.adam.weight_decay = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "grad_accum" => self.grad_accum = parse(key, value)?,
            "k_eval" => self.k_eval = parse(key, value)?,
            "k_train" => self.k_train = parse(key, value)?,
            "kl_coeff" => self.kl_coeff = parse(key, value)?,
            "sample_source" => self.sample_source = parse_with(key, value, str::parse)?,
            "penalty" => self.penalty = parse_with(key, value, str::parse)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "base_loss" => self.base_loss = parse_with(key, value, str::parse)?,
            "seed" => self.seed = parse(key, value)?,
            "t_obs" => m.t_obs = parse(key, value)?,
            "t_pred" => m.t_pred = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "resample_gaps" => self.resample_gaps = parse_bool(key, value)?,
            "layout" => {
                self.layout = parse_with(key, value, str::parse)?;
                m.emb.coord_dim = self.layout.coord_dim();
            }
            "column_order" => self.column_order = parse_with(key, value, str::parse)?,
            "latent_source" => self.latent_source = parse_with(key, value, str::parse)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "held_out" => self.held_out = (!value.is_empty()).then(|| value.to_string()),
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "val_every" => self.val_every = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "augment_probability" => self.augment_probability = parse(key, value)?,
            "augment_rotate" => self.augment_rotate = Some(parse_bool(key, value)?),
            "augment_sigma" => self.augment_sigma = parse(key, value)?,
            "arb_variant" => self.arb_variant = parse_with(key, value, str::parse)?,
            "out" => self.out = Some(PathBuf::from(value)),
            "d_temporal" => m.emb.d_temporal = parse(key, value)?,
            "d_spatial" => m.emb.d_spatial = parse(key, value)?,
            "d_social" => m.emb.d_social = parse(key, value)?,
            "d_scene" => m.emb.d_scene = parse(key, value)?,
            "d_model" => m.encoder.d_model = parse(key, value)?,
            "n_heads" => m.encoder.n_heads = parse(key, value)?,
            "d_ffn" => m.encoder.d_ffn = parse(key, value)?,
            "attention" => m.attention = parse_with(key, value, str::parse)?,
            "temporal_index" => m.temporal_index = parse_with(key, value, str::parse)?,
            "rwpe_steps" => m.rwpe_steps = parse(key, value)?,
            "eps_dist" => m.eps_dist = parse(key, value)?,
            "d_latent" => m.d_latent = parse(key, value)?,
            "d_hidden" => m.d_hidden = parse(key, value)?,
            "d_z" => m.d_z = parse(key, value)?,
            "d_future" => m.d_future = parse(key, value)?,
            "d_y" => m.d_y = parse(key, value)?,
            "condition_generator" => m.condition_generator = parse_bool(key, value)?,
            _ => return Err(ConfigError::new(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let with_line = |mut e: ConfigError| {
                e.line = Some(i + 1);
                e
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| with_line(ConfigError::new(format!("expected `key = value`, found `{line}`"))))?;
            self.set(k.trim(), v.trim()).map_err(with_line)?;
        }
        Ok(())
    }

    /// Every setting in a fixed order; [`TrainConfig::parse_text`] reads it back.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mode", m.mode.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr_max", self.lr_max.to_string());
        kv("lr_min", self.lr_min.to_string());
        kv("weight_decay", self.adam.weight_decay.to_string());
        kv("beta1", self.adam.beta1.to_string());
        kv("beta2", self.adam.beta2.to_string());
        kv("adam_eps", self.adam.eps.to_string());
        kv("grad_accum", self.grad_accum.to_string());
        kv("k_eval", self.k_eval.to_string());
        kv("k_train", self.k_train.to_string());
        kv("kl_coeff", self.kl_coeff.to_string());
        kv("sample_source", self.sample_source.to_string());
        kv("penalty", self.penalty.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("base_loss", self.base_loss.to_string());
        kv("seed", self.seed.to_string());
        kv("t_obs", m.t_obs.to_string());
        kv("t_pred", m.t_pred.to_string());
        kv("stride", self.stride.to_string());
        kv("resample_gaps", self.resample_gaps.to_string());
        kv("layout", self.layout.to_string());
        kv("column_order", self.column_order.to_string());
        kv("latent_source", self.latent_source.to_string());
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        if let Some(h) = &self.held_out {
            kv("held_out", h.clone());
        }
        kv("val_fraction", self.val_fraction.to_string());
        kv("val_every", self.val_every.to_string());
        kv("augment", self.augment.to_string());
        kv("augment_probability", self.augment_probability.to_string());
        if let Some(r) = self.augment_rotate {
            kv("augment_rotate", r.to_string());
        }
        kv("augment_sigma", self.augment_sigma.to_string());
        kv("arb_variant", self.arb_variant.to_string());
        if let Some(o) = &self.out {
            kv("out", o.display().to_string());
        }
        kv("d_temporal", m.emb.d_temporal.to_string());
        kv("d_spatial", m.emb.d_spatial.to_string());
        kv("d_social", m.emb.d_social.to_string());
        kv("d_scene", m.emb.d_scene.to_string());
        kv("d_model", m.encoder.d_model.to_string());
        kv("n_heads", m.encoder.n_heads.to_string());
        kv("d_ffn", m.encoder.d_ffn.to_string());
        kv("attention", m.attention.to_string());
        kv("temporal_index", m.temporal_index.to_string());
        kv("rwpe_steps", m.rwpe_steps.to_string());
        kv("eps_dist", m.eps_dist.to_string());
        kv("d_latent", m.d_latent.to_string());
        kv("d_hidden", m.d_hidden.to_string());
        kv("d_z", m.d_z.to_string());
        kv("d_future", m.d_future.to_string());
        kv("d_y", m.d_y.to_string());
        kv("condition_generator", m.condition_generator.to_string());
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::new(e.to_string()))?;
        if self.model.coord_dim() != self.layout.coord_dim() {
            return Err(ConfigError::new("layout and coord_dim disagree"));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(ConfigError::new("need 0 <= lr_min <= lr_max and lr_max > 0"));
        }
        if self.grad_accum == 0 || self.val_every == 0 || self.stride == 0 {
            return Err(ConfigError::new("grad_accum, val_every and stride must be >= 1"));
        }
        if self.k_eval == 0 {
            return Err(ConfigError::new("k_eval must be >= 1"));
        }
        if self.model.mode == Mode::Stochastic && self.k_train == 0 {
            return Err(ConfigError::new("k_train must be >= 1"));
        }
        if !(self.kl_coeff >= 0.0) {
            return Err(ConfigError::new("kl_coeff must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(ConfigError::new("val_fraction must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.augment_probability) || !(self.augment_sigma >= 0.0) {
            return Err(ConfigError::new("augment_probability must be in [0, 1] and augment_sigma >= 0"));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<PenaltySchedule, ConfigError> {
        PenaltySchedule::new(self.penalty, self.alpha, self.beta, self.model.t_pred)
            .map_err(|e| ConfigError::new(e.to_string()))
    }

    pub fn objective(&self) -> Result<Objective, ConfigError> {
        Ok(Objective {
            schedule: self.schedule()?,
            base: self.base_loss,
            stochastic: StochasticObjective {
                k_train: self.k_train,
                kl_coeff: self.kl_coeff,
                source: self.sample_source,
            },
        })
    }

    /// Evaluation sample count: always 1 for deterministic models.
    pub fn effective_k(&self) -> usize {
        match self.model.mode {
            Mode::Deterministic => 1,
            Mode::Stochastic => self.k_eval,
        }
    }

    pub fn window_config(&self) -> WindowConfig {
        WindowConfig {
            t_obs: self.model.t_obs,
            t_pred: self.model.t_pred,
            stride: self.stride,
            resample_gaps: self.resample_gaps,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            probability: if self.augment { self.augment_probability } else { 0.0 },
            rotate: self.augment_rotate.unwrap_or(self.layout == Layout::FrameAgentXy),
            trans_sigma: self.augment_sigma,
        }
    }

    pub fn with_model_dims(mut self, emb: EmbeddingConfig, encoder: EncoderConfig) -> Self {
        self.model.emb = emb;
        self.model.encoder = encoder;
        self
    }

    pub fn attention(&self) -> AttentionScope {
        self.model.attention
    }

    pub fn temporal_index(&self) -> TemporalIndex {
        self.model.temporal_index
    }
}
