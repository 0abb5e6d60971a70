//! Training and evaluation loops.

pub mod checkpoint;
pub mod config;
pub mod optim;

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cvae::agent_noise;
use crate::data::{augment, read_manifest, DataError, LatentSource, SceneData, TrajectoryWindow};
use crate::metrics::{AgentForecast, ArbVariant, MetricsAccumulator, MetricsError, MetricsReport};
use crate::model::{Head, Mode, Model, ModelError};
use crate::tensor::{Tape, Tensor, TensorError};

pub use checkpoint::{blob_path, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use config::{ConfigError, TrainConfig};
pub use optim::{adamw_step, adamw_step_store, cosine_lr, AdamWConfig, NonFiniteGradient, OptimizerState};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
        last_good: Box<Checkpoint>,
    },
    #[error("{0}")]
    Invalid(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

/// SplitMix64 finalizer used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Windows used for training, model selection and held-out testing.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<TrajectoryWindow>,
    pub val: Vec<TrajectoryWindow>,
    pub test: Vec<TrajectoryWindow>,
}

fn check_latent_dim(cfg: &TrainConfig) -> Result<(), TrainError> {
    if let LatentSource::Occupancy { grid } = cfg.latent_source {
        if grid * grid != cfg.model.d_latent {
            return Err(TrainError::Invalid(format!(
                "occupancy grid {grid}×{grid} gives {} latents but d_latent is {}",
                grid * grid,
                cfg.model.d_latent
            )));
        }
    }
    Ok(())
}

/// Every scene of a manifest, windowed with latents attached.
pub fn load_scenes(cfg: &TrainConfig, manifest: &Path) -> Result<Vec<SceneData>, TrainError> {
    check_latent_dim(cfg)?;
    read_manifest(manifest)?
        .iter()
        .map(|e| {
            SceneData::load(
                e,
                cfg.layout,
                cfg.column_order,
                cfg.window_config(),
                cfg.latent_source,
                cfg.model.d_latent,
            )
            .map_err(TrainError::from)
        })
        .collect()
}

impl Dataset {
    /// Training windows double as validation windows when `val` is empty.
    pub fn from_windows(train: Vec<TrajectoryWindow>, val: Vec<TrajectoryWindow>) -> Self {
        Self {
            train,
            val,
            test: Vec::new(),
        }
    }

    /// Splits scenes for leave-one-out when `held_out` is set, and moves the
    /// last `val_fraction` of each training scene's windows to validation.
    pub fn from_scenes(scenes: Vec<SceneData>, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let names: Vec<String> = scenes.iter().map(|s| s.name.clone()).collect();
        let train_names = match &cfg.held_out {
            Some(h) => crate::data::leave_one_out_split(&names, h)?.train,
            None => names,
        };
        let mut ds = Dataset::default();
        for s in scenes {
            if !train_names.contains(&s.name) {
                ds.test.extend(s.windows);
                continue;
            }
            let n_val = (s.windows.len() as f64 * cfg.val_fraction).ceil() as usize;
            let split = s.windows.len() - n_val.min(s.windows.len());
            let mut w = s.windows;
            ds.val.extend(w.split_off(split));
            ds.train.extend(w);
        }
        if ds.train.is_empty() {
            return Err(TrainError::Invalid("no complete training windows in the data".into()));
        }
        Ok(ds)
    }

    pub fn load(cfg: &TrainConfig, manifest: &Path) -> Result<Self, TrainError> {
        Self::from_scenes(load_scenes(cfg, manifest)?, cfg)
    }

    pub fn validation(&self) -> &[TrajectoryWindow] {
        if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        }
    }
}

/// Full-dataset metrics. Stochastic models draw `k` samples per window from
/// a seed derived from `seed` and the window index.
pub fn evaluate(
    model: &Model,
    windows: &[TrajectoryWindow],
    k: usize,
    seed: u64,
    arb: ArbVariant,
) -> Result<MetricsReport, TrainError> {
    if model.mode() == Mode::Deterministic && k != 1 {
        return Err(TrainError::Invalid(format!(
            "deterministic checkpoint yields one forecast per agent; K = {k} requested"
        )));
    }
    if k == 0 {
        return Err(TrainError::Invalid("K must be >= 1".into()));
    }
    let mut acc = MetricsAccumulator::new(arb);
    for (i, w) in windows.iter().enumerate() {
        if w.coord_dim() != model.cfg.coord_dim() {
            return Err(TrainError::Invalid(format!(
                "data has coord_dim {}, checkpoint expects {}",
                w.coord_dim(),
                model.cfg.coord_dim()
            )));
        }
        let point = model.predict_point(w)?;
        let samples = match model.head() {
            Head::Deterministic { .. } => None,
            Head::Stochastic(_) => Some(model.predict(w, k, mix_seed(seed, i as u64))?),
        };
        let len = point.shape()[1];
        for a in 0..w.n_agents() {
            let gt = w
                .future_of(a)
                .ok_or_else(|| TrainError::Invalid("evaluation window has no future".into()))?;
            let p = &point.data()[a * len..(a + 1) * len];
            let pool = match &samples {
                Some(s) => (0..k).map(|j| s.trajectory(j, a)).collect(),
                None => vec![p],
            };
            acc.push(&AgentForecast {
                scene: &w.scene,
                point: p,
                samples: pool,
                gt,
                coord_dim: w.coord_dim(),
            })?;
        }
    }
    Ok(acc.finish(k))
}

/// Score used for best-checkpoint selection (lower is better).
pub fn selection_score(mode: Mode, r: &MetricsReport) -> Option<f64> {
    let v = &r.sample_averaged;
    match mode {
        Mode::Deterministic => v.ade.or(v.cade),
        Mode::Stochastic => v.min_ade_k,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub trajectory: f64,
    pub kl: Option<f64>,
    pub val_score: Option<f64>,
    pub val_final: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} lr={} loss={} traj={}", self.epoch, self.lr, self.loss, self.trajectory)?;
        if let Some(kl) = self.kl {
            write!(f, " kl={kl}")?;
        }
        if let Some(v) = self.val_score {
            write!(f, " val={v}")?;
        }
        if let Some(v) = self.val_final {
            write!(f, " val_final={v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

const LOG_TAIL: usize = 50;

/// The configuration as recorded in a checkpoint: the destination path is
/// dropped so identical runs written to different places stay identical.
fn stored_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        out: None,
        ..cfg.clone()
    }
}

fn finish_checkpoint(
    cfg: &TrainConfig,
    mut model: Model,
    val: &[TrajectoryWindow],
    history: &[EpochLog],
) -> Result<Checkpoint, TrainError> {
    // metrics are recorded for the stored precision so a reload reproduces them
    model.store.round_to_f32();
    let metrics = if val.is_empty() {
        None
    } else {
        Some(evaluate(&model, val, cfg.effective_k(), cfg.seed, cfg.arb_variant)?)
    };
    let skip = history.len().saturating_sub(LOG_TAIL);
    Ok(Checkpoint {
        config: stored_config(cfg),
        model,
        metrics,
        log: history[skip..].iter().map(ToString::to_string).collect(),
    })
}

/// Seeded training run. The returned checkpoint holds the parameters with
/// the best validation score (or the initial ones when `epochs == 0`).
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::Invalid("no training windows".into()));
    }
    let obj = cfg.objective()?;
    let aug = cfg.augment_config();
    let val = data.validation();
    let k_eval = cfg.effective_k();

    let mut model = Model::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut opt = OptimizerState::for_store(&model.store, cfg.adam);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);

    let mut best: Option<(f64, crate::params::ParamStore, usize)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let n = data.train.len();
    let ids: Vec<_> = model.store.ids().collect();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        let mut acc: Vec<Tensor> = Vec::new();
        let mut pending = 0;
        let (mut loss_sum, mut traj_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        for (step, &wi) in order.iter().enumerate() {
            let w = augment(&data.train[wi], &mut aug_rng, &aug);
            let noise = match model.mode() {
                Mode::Stochastic => agent_noise(
                    mix_seed(cfg.seed, ((epoch as u64) << 32) | step as u64),
                    &w.agent_ids,
                    cfg.k_train,
                    cfg.model.d_z,
                ),
                Mode::Deterministic => Vec::new(),
            };
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let lv = model.loss(&mut tape, &bound, &w, &obj, &noise)?;
            let loss = tape.value(lv.total).item();
            let diverged = |detail: String, model: &Model| TrainError::Diverged {
                epoch,
                step,
                detail,
                last_good: Box::new(Checkpoint {
                    config: stored_config(cfg),
                    model: match &best {
                        Some((_, store, _)) => {
                            let mut m = model.clone();
                            m.store = store.clone();
                            m
                        }
                        None => model.clone(),
                    },
                    metrics: None,
                    log: history.iter().map(ToString::to_string).collect(),
                }),
            };
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}"), &model));
            }
            loss_sum += loss;
            traj_sum += tape.value(lv.trajectory).item();
            kl_sum += lv.kl.map_or(0.0, |k| tape.value(k).item());
            let grads = tape.backward(lv.total)?;
            if acc.is_empty() {
                acc = ids.iter().map(|&id| grads.get(bound.var(id))).collect();
            } else {
                for (a, &id) in acc.iter_mut().zip(&ids) {
                    if let Some(g) = grads.get_slice(bound.var(id)) {
                        a.data_mut().iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            pending += 1;
            if pending == cfg.grad_accum || step + 1 == n {
                if pending > 1 {
                    let s = 1.0 / pending as f64;
                    acc.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
                }
                if let Err(e) = adamw_step_store(&mut model.store, &acc, &mut opt, lr) {
                    return Err(diverged(
                        format!("non-finite gradient in `{}` at index {}", e.param, e.index),
                        &model,
                    ));
                }
                acc.clear();
                pending = 0;
            }
        }
        let mut log = EpochLog {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / n as f64,
            trajectory: traj_sum / n as f64,
            kl: (model.mode() == Mode::Stochastic).then_some(kl_sum / n as f64),
            val_score: None,
            val_final: None,
        };
        if (epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs {
            let r = evaluate(&model, val, k_eval, cfg.seed, cfg.arb_variant)?;
            let score = selection_score(model.mode(), &r);
            log.val_score = score;
            log.val_final = match model.mode() {
                Mode::Deterministic => r.sample_averaged.fde.or(r.sample_averaged.cfde),
                Mode::Stochastic => r.sample_averaged.min_fde_k,
            };
            if let Some(s) = score {
                if best.as_ref().is_none_or(|(b, _, _)| s < *b) {
                    best = Some((s, model.store.clone(), epoch + 1));
                }
            }
        }
        on_epoch(&log);
        history.push(log);
    }

    let best_epoch = best.as_ref().map(|b| b.2);
    if let Some((_, store, _)) = best {
        model.store = store;
    }
    let checkpoint = finish_checkpoint(cfg, model, val, &history)?;
    if let Some(out) = &cfg.out {
        checkpoint.save(out)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        history,
        best_epoch,
    })
}
