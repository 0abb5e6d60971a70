//! Condition fusion, the CVAE networks and trajectory decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::params::{Bound, Mlp, ParamStore};
use crate::tensor::{mlp_forward, Tape, Tensor, TensorError, Var};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CvaeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Shape(String),
}

/// Diagonal Gaussian in (mean, log-variance) form.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Self {
        assert_eq!(mu.len(), logvar.len());
        let logvar = logvar.into_iter().map(|l| l.clamp(LOGVAR_MIN, LOGVAR_MAX)).collect();
        Self { mu, logvar }
    }

    pub fn standard(d: usize) -> Self {
        Self::new(vec![0.0; d], vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.logvar.iter().map(|l| (0.5 * l).exp()).collect()
    }

    /// Log density at `z`.
    pub fn log_pdf(&self, z: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        z.iter()
            .zip(&self.mu)
            .zip(&self.logvar)
            .map(|((z, m), l)| -0.5 * (ln_2pi + l + (z - m) * (z - m) / l.exp()))
            .sum()
    }
}

/// Closed-form `KL(q ‖ p)` summed over dimensions.
pub fn kl_divergence(q: &GaussianParams, p: &GaussianParams) -> f64 {
    assert_eq!(q.dim(), p.dim(), "latent dimensions differ");
    q.mu.iter()
        .zip(&q.logvar)
        .zip(p.mu.iter().zip(&p.logvar))
        .map(|((mq, lq), (mp, lp))| 0.5 * (lp - lq) + (lq.exp() + (mq - mp) * (mq - mp)) / (2.0 * lp.exp()) - 0.5)
        .sum()
}

pub fn reparameterize_plain(g: &GaussianParams, noise: &[f64]) -> Vec<f64> {
    g.mu.iter()
        .zip(g.sigma())
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect()
}

/// Gaussian parameters for every agent, as tape values `[A × d_z]`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub logvar: Var,
}

impl GaussianVars {
    pub fn row(&self, tape: &Tape, a: usize) -> GaussianParams {
        GaussianParams {
            mu: tape.value(self.mu).row(a).to_vec(),
            logvar: tape.value(self.logvar).row(a).to_vec(),
        }
    }
}

/// `c_a = [mean_t Φ_Scene ; mean_t Φ_Agents(a, t)]` for every agent.
///
/// `agent_emb` rows are frame-major (`t * A + a`).
pub fn condition_vector(tape: &mut Tape, scene_emb: Var, agent_emb: Var, n_agents: usize) -> Result<Var, CvaeError> {
    let t = tape.value(scene_emb).dims2().map(|(r, _)| r).unwrap_or(0);
    let rows = tape.value(agent_emb).dims2().map(|(r, _)| r).unwrap_or(0);
    if t == 0 || n_agents == 0 || rows != t * n_agents {
        return Err(CvaeError::Shape(format!(
            "scene {:?} and agent {:?} embeddings do not describe {n_agents} agents",
            tape.shape(scene_emb),
            tape.shape(agent_emb)
        )));
    }
    let inv_t = 1.0 / t as f64;
    let scene_pool = tape.constant(Tensor::full(&[n_agents, t], inv_t));
    let mut agent_pool = vec![0.0; n_agents * rows];
    for a in 0..n_agents {
        for f in 0..t {
            agent_pool[a * rows + f * n_agents + a] = inv_t;
        }
    }
    let agent_pool = tape.constant(Tensor::new(&[n_agents, rows], agent_pool)?);
    let s = tape.matmul_stable(scene_pool, scene_emb)?;
    let g = tape.matmul_stable(agent_pool, agent_emb)?;
    Ok(tape.concat_cols(&[s, g])?)
}

fn gaussian_head(tape: &mut Tape, out: Var, d_z: usize) -> Result<GaussianVars, CvaeError> {
    let width = tape.value(out).last_dim();
    if width != 2 * d_z {
        return Err(CvaeError::Shape(format!("gaussian head emits {width} values, need {}", 2 * d_z)));
    }
    let mu = tape.slice_cols(out, 0, d_z)?;
    let raw = tape.slice_cols(out, d_z, d_z)?;
    let logvar = tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
    Ok(GaussianVars { mu, logvar })
}

/// Prior network `p(z | c)`.
pub fn prior_params(tape: &mut Tape, c: Var, net: &[crate::tensor::LayerRef], d_z: usize) -> Result<GaussianVars, CvaeError> {
    let out = mlp_forward(tape, c, net)?;
    gaussian_head(tape, out, d_z)
}

/// Recognition network `q(z | c, Y)`; `future` is `[A × T_pred·C]`.
pub fn posterior_params(
    tape: &mut Tape,
    c: Var,
    future: Var,
    future_net: &[crate::tensor::LayerRef],
    net: &[crate::tensor::LayerRef],
    d_z: usize,
) -> Result<GaussianVars, CvaeError> {
    let f = mlp_forward(tape, future, future_net)?;
    let joined = tape.concat_cols(&[c, f])?;
    let out = mlp_forward(tape, joined, net)?;
    gaussian_head(tape, out, d_z)
}

/// `z = mu + exp(logvar / 2) ⊙ noise`.
pub fn reparameterize(tape: &mut Tape, g: GaussianVars, noise: &Tensor) -> Result<Var, CvaeError> {
    let half = tape.scale(g.logvar, 0.5);
    let sigma = tape.exp(half);
    let eps = tape.constant(noise.clone());
    let spread = tape.mul(sigma, eps)?;
    Ok(tape.add(g.mu, spread)?)
}

/// Per-agent `KL(q ‖ p)` on the tape, `[A × 1]`.
pub fn kl_rows(tape: &mut Tape, q: GaussianVars, p: GaussianVars) -> Result<Var, CvaeError> {
    let half_gap = tape.sub(p.logvar, q.logvar)?;
    let half_gap = tape.scale(half_gap, 0.5);
    let var_q = tape.exp(q.logvar);
    let dm = tape.sub(q.mu, p.mu)?;
    let dm2 = tape.square(dm);
    let num = tape.add(var_q, dm2)?;
    let neg_lp = tape.scale(p.logvar, -1.0);
    let inv_var_p = tape.exp(neg_lp);
    let ratio = tape.mul(num, inv_var_p)?;
    let ratio = tape.scale(ratio, 0.5);
    let terms = tape.add(half_gap, ratio)?;
    let terms = tape.add_scalar(terms, -0.5);
    Ok(tape.sum_rows(terms))
}

/// Generation network: `Ỹ = g([c; z])`, or `g(z)` when unconditioned.
pub fn generate(
    tape: &mut Tape,
    c: Var,
    z: Var,
    net: &[crate::tensor::LayerRef],
    use_condition: bool,
) -> Result<Var, CvaeError> {
    let input = if use_condition { tape.concat_cols(&[c, z])? } else { z };
    Ok(mlp_forward(tape, input, net)?)
}

/// Lower-triangular block matrix turning step-major displacements into
/// cumulative offsets: `out[t*C + c] = Σ_{s ≤ t} in[s*C + c]`.
pub fn cumulative_matrix(t_pred: usize, coord_dim: usize) -> Tensor {
    let n = t_pred * coord_dim;
    let mut m = vec![0.0; n * n];
    for s in 0..t_pred {
        for t in s..t_pred {
            for c in 0..coord_dim {
                m[(s * coord_dim + c) * n + t * coord_dim + c] = 1.0;
            }
        }
    }
    Tensor::new(&[n, n], m).expect("square")
}

/// Γ_Decoder followed by displacement integration from the last observed
/// position. `last_obs` is `[A × C]`; the result is `[A × T_pred·C]`.
pub fn decode(
    tape: &mut Tape,
    input: Var,
    net: &[crate::tensor::LayerRef],
    last_obs: &Tensor,
    t_pred: usize,
) -> Result<Var, CvaeError> {
    let (a, c) = last_obs
        .dims2()
        .ok_or_else(|| CvaeError::Shape(format!("last_obs must be [A × C], got {:?}", last_obs.shape())))?;
    let disp = mlp_forward(tape, input, net)?;
    if tape.shape(disp) != [a, t_pred * c] {
        return Err(CvaeError::Shape(format!(
            "decoder emits {:?}, expected [{a} × {}]",
            tape.shape(disp),
            t_pred * c
        )));
    }
    let cum = tape.constant(cumulative_matrix(t_pred, c));
    let offsets = tape.matmul(disp, cum)?;
    let anchor: Vec<f64> = (0..a).flat_map(|i| last_obs.row(i).repeat(t_pred)).collect();
    let anchor = tape.constant(Tensor::new(&[a, t_pred * c], anchor)?);
    Ok(tape.add(offsets, anchor)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionMode {
    Deterministic,
    Stochastic,
}

/// `K` trajectories per agent: `trajectories` is `[K × A × T_pred × C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub mode: PredictionMode,
    pub trajectories: Tensor,
    pub latents_used: Option<Tensor>,
}

impl PredictionSet {
    pub fn k(&self) -> usize {
        self.trajectories.shape()[0]
    }

    pub fn n_agents(&self) -> usize {
        self.trajectories.shape()[1]
    }

    pub fn t_pred(&self) -> usize {
        self.trajectories.shape()[2]
    }

    pub fn coord_dim(&self) -> usize {
        self.trajectories.shape()[3]
    }

    /// Flat `T_pred·C` trajectory of sample `k` for agent `a`.
    pub fn trajectory(&self, k: usize, a: usize) -> &[f64] {
        let len = self.t_pred() * self.coord_dim();
        let start = (k * self.n_agents() + a) * len;
        &self.trajectories.data()[start..start + len]
    }

    /// Sample `k` for agent `a` as a `[T_pred × C]` tensor.
    pub fn trajectory_tensor(&self, k: usize, a: usize) -> Tensor {
        Tensor::new(&[self.t_pred(), self.coord_dim()], self.trajectory(k, a).to_vec()).expect("trajectory")
    }
}

/// Standard-normal noise `[K × A × d_z]`. Each agent draws from its own
/// ChaCha stream selected by agent id, so reordering agents reorders noise.
pub fn agent_noise(seed: u64, agent_ids: &[i64], k: usize, d_z: usize) -> Vec<Tensor> {
    let per_agent: Vec<Vec<f64>> = agent_ids
        .iter()
        .map(|&id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id as u64);
            (0..k * d_z).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect();
    (0..k)
        .map(|s| {
            let data = per_agent.iter().flat_map(|n| n[s * d_z..(s + 1) * d_z].iter().copied()).collect();
            Tensor::new(&[agent_ids.len(), d_z], data).expect("noise shape")
        })
        .collect()
}

/// Networks of the stochastic head.
#[derive(Debug, Clone, PartialEq)]
pub struct CvaeNets {
    pub prior: Mlp,
    pub future: Mlp,
    pub posterior: Mlp,
    pub generator: Mlp,
    pub decoder: Mlp,
    pub d_z: usize,
    pub condition_generator: bool,
}

impl CvaeNets {
    pub fn param_count(&self, store: &ParamStore) -> usize {
        [&self.prior, &self.future, &self.posterior, &self.generator, &self.decoder]
            .iter()
            .map(|m| m.param_count(store))
            .sum()
    }

    /// Draws `k` latents per agent from the prior and decodes each.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_trajectories(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        c: Var,
        last_obs: &Tensor,
        t_pred: usize,
        noise: &[Tensor],
    ) -> Result<PredictionSet, CvaeError> {
        let (a, cd) = last_obs.dims2().ok_or_else(|| CvaeError::Shape("last_obs must be rank 2".into()))?;
        let prior = prior_params(tape, c, &self.prior.bind(bound), self.d_z)?;
        let gen = self.generator.bind(bound);
        let dec = self.decoder.bind(bound);
        let mut traj = Vec::with_capacity(noise.len() * a * t_pred * cd);
        let mut latents = Vec::with_capacity(noise.len() * a * self.d_z);
        for eps in noise {
            let z = reparameterize(tape, prior, eps)?;
            let y = generate(tape, c, z, &gen, self.condition_generator)?;
            let p = decode(tape, y, &dec, last_obs, t_pred)?;
            latents.extend_from_slice(tape.value(z).data());
            traj.extend_from_slice(tape.value(p).data());
        }
        let k = noise.len();
        Ok(PredictionSet {
            mode: PredictionMode::Stochastic,
            trajectories: Tensor::new(&[k, a, t_pred, cd], traj)?,
            latents_used: Some(Tensor::new(&[k, a, self.d_z], latents)?),
        })
    }
}
