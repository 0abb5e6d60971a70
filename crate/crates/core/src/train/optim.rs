//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// First and second moments mirroring the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub hyper: AdamWConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonFiniteGradient {
    pub param: String,
    pub index: usize,
}

impl OptimizerState {
    pub fn new(shapes: impl IntoIterator<Item = usize>, hyper: AdamWConfig) -> Self {
        let (m, v) = shapes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { m, v, step: 0, hyper }
    }

    pub fn for_store(store: &ParamStore, hyper: AdamWConfig) -> Self {
        Self::new(store.ids().map(|id| store.get(id).len()), hyper)
    }
}

/// One AdamW update of every parameter slice.
///
/// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`, both terms evaluated at the old θ.
/// A non-finite gradient leaves every parameter untouched.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    names: &[&str],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), NonFiniteGradient> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(NonFiniteGradient {
                param: names.get(i).map_or_else(|| format!("#{i}"), |n| n.to_string()),
                index,
            });
        }
    }
    let h = state.hyper;
    state.step += 1;
    let bc1 = 1.0 - h.beta1.powf(state.step as f64);
    let bc2 = 1.0 - h.beta2.powf(state.step as f64);
    for (p, (g, (m, v))) in params.iter_mut().zip(grads.iter().zip(state.m.iter_mut().zip(state.v.iter_mut()))) {
        for j in 0..p.len() {
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let theta = p[j];
            p[j] = theta - lr * (m_hat / (v_hat.sqrt() + h.eps)) - lr * h.weight_decay * theta;
        }
    }
    Ok(())
}

/// Applies [`adamw_step`] to a whole store with per-parameter gradients.
pub fn adamw_step_store(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), NonFiniteGradient> {
    let names: Vec<String> = store.ids().map(|id| store.name(id).to_string()).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let g: Vec<&[f64]> = grads.iter().map(Tensor::data).collect();
    let mut p: Vec<&mut [f64]> = store.tensors_mut().iter_mut().map(Tensor::data_mut).collect();
    adamw_step(&mut p, &g, &names, state, lr)
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π t / total))`; `total == 0` gives `lr_max`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let t = t.min(total) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t / total as f64).cos())
}
