use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrajectoryWindow;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub probability: f64,
    pub rotate: bool,
    /// Translation is drawn from `U[-trans_sigma, trans_sigma]²`.
    pub trans_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            rotate: true,
            trans_sigma: 1.0,
        }
    }
}

impl AugmentConfig {
    /// Box corners are not rotated by default.
    pub fn for_coord_dim(c: usize) -> Self {
        Self {
            rotate: c == 2,
            ..Self::default()
        }
    }
}

/// Rotates every planar pair by `theta` about the origin, then translates.
pub fn rigid_transform(w: &TrajectoryWindow, theta: f64, shift: [f64; 2]) -> TrajectoryWindow {
    let (s, c) = theta.sin_cos();
    let apply = |t: &Tensor| {
        let mut t = t.clone();
        for p in t.data_mut().chunks_mut(2) {
            let (x, y) = (p[0], p[1]);
            p[0] = c * x - s * y + shift[0];
            p[1] = s * x + c * y + shift[1];
        }
        t
    };
    TrajectoryWindow {
        obs: apply(&w.obs),
        future: w.future.as_ref().map(apply),
        ..w.clone()
    }
}

/// With probability `cfg.probability`, applies one random rigid motion to
/// all observed and future coordinates of every agent.
pub fn augment(w: &TrajectoryWindow, rng: &mut impl Rng, cfg: &AugmentConfig) -> TrajectoryWindow {
    if cfg.probability <= 0.0 || rng.random::<f64>() >= cfg.probability {
        return w.clone();
    }
    let theta = if cfg.rotate {
        rng.random_range(0.0..std::f64::consts::TAU)
    } else {
        0.0
    };
    let mut shift = [0.0; 2];
    if cfg.trans_sigma > 0.0 {
        for v in &mut shift {
            *v = rng.random_range(-cfg.trans_sigma..=cfg.trans_sigma);
        }
    }
    rigid_transform(w, theta, shift)
}

pub fn augment_seeded(w: &TrajectoryWindow, seed: u64, cfg: &AugmentConfig) -> TrajectoryWindow {
    augment(w, &mut ChaCha8Rng::seed_from_u64(seed), cfg)
}
