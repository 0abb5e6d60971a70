//! Named finite-difference suites over the building blocks and the full
//! training objectives.
//!
//! Every check reduces its output to a scalar with a fixed random projection
//! so that no gradient is trivially zero, then compares the tape gradient of
//! that scalar with central differences.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cvae::{
    condition_vector, decode, generate, kl_rows, posterior_params, prior_params, reparameterize, GaussianVars,
};
use crate::data::{build_windows, synth_generate, SynthKind, SynthParams, TrajectoryWindow, WindowConfig};
use crate::encoder::{encoder_forward, EncoderConfig, EncoderParams};
use crate::encodings::EmbeddingConfig;
use crate::losses::{best_of_k_rows, weighted_loss_rows, BaseLoss, PenaltyKind, PenaltySchedule};
use crate::model::{Mode, Model, ModelConfig, Objective, SampleSource, StochasticObjective};
use crate::params::{Mlp, ParamStore};
use crate::tensor::{gradient_check, mlp_forward, Activation, GradCheckReport, Tape, Tensor, TensorError, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const MODULES: [&str; 5] = ["tensor", "encoder", "losses", "cvae", "model"];

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("unknown gradcheck module `{0}` (expected all, {list})", list = MODULES.join(", "))]
    UnknownModule(String),
    #[error("{check}: {source}")]
    Failed {
        check: String,
        #[source]
        source: TensorError,
    },
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {}/{} max_rel_err={:.3e} checked={} skipped_kinks={}",
            if self.passed() { "ok" } else { "FAIL" },
            self.module,
            self.name,
            self.report.max_rel_error,
            self.report.checked,
            self.report.skipped_kinks
        )
    }
}

/// Runs one suite by name, or all of them for `"all"`.
pub fn run(module: &str) -> Result<Vec<CheckOutcome>, GradCheckError> {
    match module {
        "all" => {
            let mut out = Vec::new();
            for m in MODULES {
                out.extend(run(m)?);
            }
            Ok(out)
        }
        "tensor" => tensor_suite(),
        "encoder" => encoder_suite(),
        "losses" => losses_suite(),
        "cvae" => cvae_suite(),
        "model" => model_suite(),
        other => Err(GradCheckError::UnknownModule(other.to_string())),
    }
}

type CheckFn = Box<dyn Fn(&mut Tape, Var) -> crate::tensor::Result<Var>>;

struct Case {
    name: String,
    input: Tensor,
    f: CheckFn,
}

fn case(name: impl Into<String>, input: Tensor, f: impl Fn(&mut Tape, Var) -> crate::tensor::Result<Var> + 'static) -> Case {
    Case {
        name: name.into(),
        input,
        f: Box::new(f),
    }
}

fn execute(module: &'static str, cases: Vec<Case>) -> Result<Vec<CheckOutcome>, GradCheckError> {
    cases
        .into_iter()
        .map(|c| {
            let report = gradient_check(&c.f, &c.input, STEP).map_err(|source| GradCheckError::Failed {
                check: format!("{module}/{}", c.name),
                source,
            })?;
            Ok(CheckOutcome {
                module,
                name: c.name,
                report,
            })
        })
        .collect()
}

fn invalid(e: impl fmt::Display) -> TensorError {
    TensorError::Invalid(e.to_string())
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// `Σ y ⊙ W` for a projection `W` fixed by `seed` and the shape of `y`.
fn project(tape: &mut Tape, y: Var, seed: u64) -> crate::tensor::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = uniform(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn tensor_suite() -> Result<Vec<CheckOutcome>, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = uniform(&mut rng, &[3, 4], -1.5, 1.5);
    let other = uniform(&mut rng, &[3, 4], -1.5, 1.5);
    let right = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    let left = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let row = uniform(&mut rng, &[4], -1.0, 1.0);
    let gamma = uniform(&mut rng, &[4], 0.5, 1.5);

    let mut cases = Vec::new();
    macro_rules! unary {
        ($name:expr, $input:expr, |$t:ident, $v:ident| $body:expr) => {
            cases.push(case($name, $input, move |$t: &mut Tape, $v: Var| {
                let y = $body;
                project($t, y, 1)
            }));
        };
    }
    {
        let r = right.clone();
        unary!("matmul_lhs", x.clone(), |t, v| {
            let b = t.constant(r.clone());
            t.matmul(v, b)?
        });
    }
    {
        let l = left.clone();
        unary!("matmul_rhs", x.clone(), |t, v| {
            let a = t.constant(l.clone());
            t.matmul(a, v)?
        });
    }
    {
        let l = left.clone();
        unary!("matmul_stable", x.clone(), |t, v| {
            let a = t.constant(l.clone());
            t.matmul_stable(a, v)?
        });
    }
    {
        let o = other.clone();
        unary!("add", x.clone(), |t, v| {
            let b = t.constant(o.clone());
            t.add(v, b)?
        });
    }
    {
        let o = other.clone();
        unary!("sub", x.clone(), |t, v| {
            let b = t.constant(o.clone());
            t.sub(b, v)?
        });
    }
    {
        let o = other.clone();
        unary!("mul", x.clone(), |t, v| {
            let b = t.constant(o.clone());
            let p = t.mul(v, b)?;
            t.mul(p, v)?
        });
    }
    {
        let rw = row.clone();
        unary!("add_row_input", x.clone(), |t, v| {
            let b = t.constant(rw.clone());
            t.add_row(v, b)?
        });
    }
    {
        let base = x.clone();
        unary!("add_row_bias", row.clone(), |t, v| {
            let b = t.constant(base.clone());
            t.add_row(b, v)?
        });
    }
    unary!("scale", x.clone(), |t, v| t.scale(v, -2.5));
    unary!("add_scalar", x.clone(), |t, v| {
        let s = t.add_scalar(v, 0.75);
        t.square(s)
    });
    unary!("relu", x.clone(), |t, v| t.relu(v));
    unary!("gelu", x.clone(), |t, v| t.gelu(v));
    unary!("exp", x.clone(), |t, v| t.exp(v));
    unary!("square", x.clone(), |t, v| t.square(v));
    unary!("smooth_l1", x.clone(), |t, v| t.smooth_l1(v));
    unary!("clamp", x.clone(), |t, v| t.clamp(v, -0.8, 0.9));
    unary!("softmax", x.clone(), |t, v| t.softmax(v));
    {
        let (g, b) = (gamma.clone(), row.clone());
        unary!("layer_norm_input", x.clone(), |t, v| {
            let g = t.constant(g.clone());
            let b = t.constant(b.clone());
            t.layer_norm(v, g, b, 1e-5)?
        });
    }
    {
        let (xs, b) = (x.clone(), row.clone());
        unary!("layer_norm_gamma", gamma.clone(), |t, v| {
            let x = t.constant(xs.clone());
            let b = t.constant(b.clone());
            t.layer_norm(x, v, b, 1e-5)?
        });
    }
    {
        let (xs, g) = (x.clone(), gamma.clone());
        unary!("layer_norm_beta", row.clone(), |t, v| {
            let x = t.constant(xs.clone());
            let g = t.constant(g.clone());
            t.layer_norm(x, g, v, 1e-5)?
        });
    }
    unary!("transpose", x.clone(), |t, v| t.transpose(v)?);
    {
        let o = other.clone();
        unary!("concat_cols", x.clone(), |t, v| {
            let b = t.constant(o.clone());
            t.concat_cols(&[b, v, v])?
        });
    }
    unary!("slice_cols", x.clone(), |t, v| t.slice_cols(v, 1, 2)?);
    unary!("sum", x.clone(), |t, v| {
        let s = t.sum(v);
        t.square(s)
    });
    unary!("mean", x.clone(), |t, v| {
        let s = t.mean(v);
        t.square(s)
    });
    unary!("sum_rows", x.clone(), |t, v| {
        let s = t.sum_rows(v);
        t.square(s)
    });
    unary!("reshape", x.clone(), |t, v| t.reshape(v, &[2, 6])?);
    unary!("slice_flat", x.clone(), |t, v| t.slice_flat(v, 3, &[2, 4])?);
    {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[4, 5, 3], Activation::Gelu, Activation::Identity, &mut rng);
        let xs = x.clone();
        cases.push(case("mlp_params", Tensor::new(&[store.numel()], store.flatten()).expect("flat"), move |t, v| {
            let bound = store.bind_flat(t, v)?;
            let input = t.constant(xs.clone());
            let y = mlp_forward(t, input, &mlp.bind(&bound))?;
            project(t, y, 2)
        }));
    }
    execute("tensor", cases)
}

fn encoder_suite() -> Result<Vec<CheckOutcome>, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = EncoderConfig::new(8, 2, 6).expect("encoder config");
    let mut store = ParamStore::new();
    let enc = EncoderParams::new(&mut store, "enc", cfg, &mut rng);
    let tokens = uniform(&mut rng, &[5, 8], -1.0, 1.0);
    let mask = {
        let mut m = vec![0.0; 25];
        for i in 0..5 {
            for j in 0..5 {
                if i % 2 != j % 2 {
                    m[i * 5 + j] = -1e9;
                }
            }
        }
        Tensor::new(&[5, 5], m).expect("mask")
    };
    let flat = Tensor::new(&[store.numel()], store.flatten()).expect("flat");
    let (s1, e1, t1) = (store.clone(), enc.clone(), tokens.clone());
    let (s2, e2) = (store.clone(), enc.clone());
    let (s3, e3, t3, m3) = (store, enc, tokens.clone(), mask);
    let cases = vec![
        case("params", flat.clone(), move |t, v| {
            let bound = s1.bind_flat(t, v)?;
            let x = t.constant(t1.clone());
            let y = encoder_forward(t, &bound, &e1, x, None).map_err(invalid)?;
            project(t, y, 3)
        }),
        case("tokens", tokens, move |t, v| {
            let bound = s2.bind_frozen(t);
            let y = encoder_forward(t, &bound, &e2, v, None).map_err(invalid)?;
            project(t, y, 3)
        }),
        case("params_masked", flat, move |t, v| {
            let bound = s3.bind_flat(t, v)?;
            let x = t.constant(t3.clone());
            let y = encoder_forward(t, &bound, &e3, x, Some(&m3)).map_err(invalid)?;
            project(t, y, 4)
        }),
    ];
    execute("encoder", cases)
}

fn losses_suite() -> Result<Vec<CheckOutcome>, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (a, t_pred, c) = (3, 6, 2);
    let gt = uniform(&mut rng, &[a, t_pred * c], -2.0, 2.0);
    let pred = uniform(&mut rng, &[a, t_pred * c], -2.0, 2.0);
    let mut cases = Vec::new();
    for kind in [PenaltyKind::Uniform, PenaltyKind::Linear, PenaltyKind::Quadratic, PenaltyKind::Parabolic] {
        for base in [BaseLoss::Mse, BaseLoss::SmoothL1] {
            let s = PenaltySchedule::new(kind, 2.0, 1.0, t_pred).expect("schedule");
            let g = gt.clone();
            cases.push(case(format!("weighted_{kind}_{base}"), pred.clone(), move |t, v| {
                let gt = t.constant(g.clone());
                let rows = weighted_loss_rows(t, v, gt, &s, base, c).map_err(invalid)?;
                project(t, rows, 5)
            }));
        }
    }
    let samples = uniform(&mut rng, &[3 * a, t_pred * c], -2.0, 2.0);
    let s = PenaltySchedule::new(PenaltyKind::Parabolic, 2.0, 1.0, t_pred).expect("schedule");
    let g = gt.clone();
    cases.push(case("best_of_k", samples, move |t, v| {
        let gt = t.constant(g.clone());
        let per: Vec<Var> = (0..3)
            .map(|k| {
                let p = t.slice_flat(v, k * a * t_pred * c, &[a, t_pred * c])?;
                weighted_loss_rows(t, p, gt, &s, BaseLoss::SmoothL1, c).map_err(invalid)
            })
            .collect::<Result<_, _>>()?;
        let best = best_of_k_rows(t, &per).map_err(invalid)?;
        Ok(t.mean(best))
    }));
    execute("losses", cases)
}

fn cvae_suite() -> Result<Vec<CheckOutcome>, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (a, d_model, d_z, t_pred, cd) = (2, 4, 3, 6, 2);
    let mut cases = Vec::new();

    let gauss = uniform(&mut rng, &[4 * a * d_z], -1.5, 1.5);
    cases.push(case("kl_rows", gauss, move |t, v| {
        let part = |t: &mut Tape, i: usize| t.slice_flat(v, i * a * d_z, &[a, d_z]);
        let q = GaussianVars {
            mu: part(t, 0)?,
            logvar: part(t, 1)?,
        };
        let p = GaussianVars {
            mu: part(t, 2)?,
            logvar: part(t, 3)?,
        };
        let kl = kl_rows(t, q, p).map_err(invalid)?;
        project(t, kl, 6)
    }));

    let musig = uniform(&mut rng, &[2 * a * d_z], -1.5, 1.5);
    let eps = uniform(&mut rng, &[a, d_z], -2.0, 2.0);
    cases.push(case("reparameterize", musig, move |t, v| {
        let g = GaussianVars {
            mu: t.slice_flat(v, 0, &[a, d_z])?,
            logvar: t.slice_flat(v, a * d_z, &[a, d_z])?,
        };
        let z = reparameterize(t, g, &eps).map_err(invalid)?;
        project(t, z, 7)
    }));

    let scene = uniform(&mut rng, &[4, d_model], -1.0, 1.0);
    let agents = uniform(&mut rng, &[4 * a, d_model], -1.0, 1.0);
    let sc = scene.clone();
    cases.push(case("condition_vector", agents.clone(), move |t, v| {
        let s = t.constant(sc.clone());
        let c = condition_vector(t, s, v, a).map_err(invalid)?;
        project(t, c, 8)
    }));

    let d_c = 2 * d_model;
    let mut store = ParamStore::new();
    let prior = Mlp::new(&mut store, "prior", &[d_c, 5, 2 * d_z], Activation::Relu, Activation::Identity, &mut rng);
    let future = Mlp::new(&mut store, "future", &[t_pred * cd, 5], Activation::Relu, Activation::Relu, &mut rng);
    let posterior = Mlp::new(&mut store, "posterior", &[d_c + 5, 5, 2 * d_z], Activation::Relu, Activation::Identity, &mut rng);
    let gen = Mlp::new(&mut store, "generator", &[d_c + d_z, 6], Activation::Relu, Activation::Relu, &mut rng);
    let dec = Mlp::new(&mut store, "decoder", &[6, 5, t_pred * cd], Activation::Relu, Activation::Identity, &mut rng);
    let cond = uniform(&mut rng, &[a, d_c], -1.0, 1.0);
    let fut = uniform(&mut rng, &[a, t_pred * cd], -2.0, 2.0);
    let last = uniform(&mut rng, &[a, cd], -1.0, 1.0);
    let eps = uniform(&mut rng, &[a, d_z], -2.0, 2.0);
    let flat = Tensor::new(&[store.numel()], store.flatten()).expect("flat");
    cases.push(case("head_params", flat, move |t, v| {
        let bound = store.bind_flat(t, v)?;
        let c = t.constant(cond.clone());
        let y = t.constant(fut.clone());
        let p = prior_params(t, c, &prior.bind(&bound), d_z).map_err(invalid)?;
        let q = posterior_params(t, c, y, &future.bind(&bound), &posterior.bind(&bound), d_z).map_err(invalid)?;
        let z = reparameterize(t, q, &eps).map_err(invalid)?;
        let h = generate(t, c, z, &gen.bind(&bound), true).map_err(invalid)?;
        let traj = decode(t, h, &dec.bind(&bound), &last, t_pred).map_err(invalid)?;
        let kl = kl_rows(t, q, p).map_err(invalid)?;
        let l = project(t, traj, 9)?;
        let k = t.sum(kl);
        t.add(l, k)
    }));
    execute("cvae", cases)
}

/// The small model used by the objective checks.
pub fn toy_model_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        mode,
        t_obs: 4,
        t_pred: 6,
        emb: EmbeddingConfig {
            d_temporal: 4,
            d_spatial: 4,
            d_social: 4,
            d_scene: 8,
            coord_dim: 2,
        },
        encoder: EncoderConfig {
            d_model: 12,
            n_heads: 2,
            d_ffn: 8,
        },
        rwpe_steps: 3,
        d_latent: 4,
        d_hidden: 8,
        d_z: 3,
        d_future: 5,
        d_y: 6,
        ..ModelConfig::default()
    }
}

/// A two-agent window with four observed and six future frames and random
/// scene latents.
pub fn toy_window() -> TrajectoryWindow {
    let p = SynthParams {
        t_obs: 4,
        t_pred: 6,
        agents: 2,
        ..SynthParams::default()
    };
    let recs = synth_generate(SynthKind::Circular, 1, &p, 3);
    let cfg = WindowConfig {
        t_obs: 4,
        t_pred: 6,
        ..WindowConfig::default()
    };
    let mut w = build_windows("toy", &recs, cfg).expect("toy window").remove(0);
    w.scene_latents = Some(uniform(&mut ChaCha8Rng::seed_from_u64(15), &[4, 4], -1.0, 1.0));
    w
}

fn objective_case(name: &str, mode: Mode, obj: Objective) -> Case {
    let model = Model::new(toy_model_config(mode), &mut ChaCha8Rng::seed_from_u64(16)).expect("toy model");
    let w = toy_window();
    let noise = crate::cvae::agent_noise(17, &w.agent_ids, obj.stochastic.k_train, model.cfg.d_z);
    let flat = Tensor::new(&[model.store.numel()], model.store.flatten()).expect("flat");
    case(name, flat, move |t, v| {
        let bound = model.store.bind_flat(t, v)?;
        Ok(model.loss(t, &bound, &w, &obj, &noise).map_err(invalid)?.total)
    })
}

fn model_suite() -> Result<Vec<CheckOutcome>, GradCheckError> {
    let schedule = |kind| PenaltySchedule::new(kind, 2.0, 1.0, 6).expect("schedule");
    let stoch = |source| StochasticObjective {
        k_train: 3,
        kl_coeff: 1.0,
        source,
    };
    let cases = vec![
        objective_case(
            "deterministic_objective",
            Mode::Deterministic,
            Objective {
                schedule: schedule(PenaltyKind::Parabolic),
                base: BaseLoss::SmoothL1,
                stochastic: StochasticObjective::default(),
            },
        ),
        objective_case(
            "deterministic_objective_mse_linear",
            Mode::Deterministic,
            Objective {
                schedule: schedule(PenaltyKind::Linear),
                base: BaseLoss::Mse,
                stochastic: StochasticObjective::default(),
            },
        ),
        objective_case(
            "stochastic_objective",
            Mode::Stochastic,
            Objective {
                schedule: schedule(PenaltyKind::Parabolic),
                base: BaseLoss::SmoothL1,
                stochastic: stoch(SampleSource::Posterior),
            },
        ),
        objective_case(
            "stochastic_objective_prior_samples",
            Mode::Stochastic,
            Objective {
                schedule: schedule(PenaltyKind::Quadratic),
                base: BaseLoss::Mse,
                stochastic: stoch(SampleSource::Prior),
            },
        ),
    ];
    execute("model", cases)
}
