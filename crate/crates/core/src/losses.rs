//! Trajectory losses: per-step base losses, time-weighted penalties,
//! best-of-K selection and the final objective.
//!
//! Every loss exists twice: a plain `f64` version used for reporting and as
//! a reference, and a tape version used for training.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid penalty schedule: {0}")]
    Schedule(String),
    #[error("shape mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    Shape { pred: Vec<usize>, gt: Vec<usize> },
    #[error("KL term must be non-negative, got {0}")]
    NegativeKl(f64),
    #[error("best-of-K needs at least one sample")]
    NoSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaseLoss {
    Mse,
    #[default]
    SmoothL1,
}

impl fmt::Display for BaseLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseLoss::Mse => "mse",
            BaseLoss::SmoothL1 => "smooth_l1",
        })
    }
}

impl FromStr for BaseLoss {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mse" => Ok(Self::Mse),
            "smooth_l1" | "sl1" => Ok(Self::SmoothL1),
            _ => Err(format!("unknown base loss `{s}` (mse|smooth_l1)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    Uniform,
    Linear,
    Quadratic,
    Parabolic,
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyKind::Uniform => "uniform",
            PenaltyKind::Linear => "linear",
            PenaltyKind::Quadratic => "quadratic",
            PenaltyKind::Parabolic => "parabolic",
        })
    }
}

impl FromStr for PenaltyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Quadratic),
            "parabolic" => Ok(Self::Parabolic),
            _ => Err(format!("unknown penalty `{s}` (uniform|linear|quadratic|parabolic)")),
        }
    }
}

/// Per-step weight function `w(t)` over `t = 1..=t_pred`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltySchedule {
    kind: PenaltyKind,
    alpha: f64,
    beta: f64,
    t_pred: usize,
}

impl PenaltySchedule {
    pub fn new(kind: PenaltyKind, alpha: f64, beta: f64, t_pred: usize) -> Result<Self, LossError> {
        if t_pred == 0 {
            return Err(LossError::Schedule("t_pred must be >= 1".into()));
        }
        if !(alpha.is_finite() && beta.is_finite() && alpha >= 0.0 && beta >= 0.0) {
            return Err(LossError::Schedule(format!("alpha {alpha} and beta {beta} must be finite and >= 0")));
        }
        if kind == PenaltyKind::Parabolic && alpha < beta {
            return Err(LossError::Schedule(format!(
                "parabolic penalty needs alpha >= beta, got alpha {alpha} < beta {beta}"
            )));
        }
        let s = Self {
            kind,
            alpha,
            beta,
            t_pred,
        };
        if let Some(t) = (1..=t_pred).find(|&t| !(s.weight(t) > 0.0)) {
            return Err(LossError::Schedule(format!("weight at t={t} is not positive")));
        }
        Ok(s)
    }

    pub fn uniform(t_pred: usize) -> Self {
        Self::new(PenaltyKind::Uniform, 1.0, 1.0, t_pred).expect("uniform schedule is valid")
    }

    pub fn kind(&self) -> PenaltyKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn t_pred(&self) -> usize {
        self.t_pred
    }

    /// `w(t)` for integer step `t`.
    pub fn weight(&self, t: usize) -> f64 {
        self.weight_at(t as f64 / self.t_pred as f64)
    }

    /// The weight function at normalized time `tau = t / t_pred`.
    pub fn weight_at(&self, tau: f64) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        match self.kind {
            PenaltyKind::Uniform => 1.0,
            PenaltyKind::Linear => a + tau * (b - a),
            PenaltyKind::Quadratic => {
                let l = a + tau * (b - a);
                l * l
            }
            PenaltyKind::Parabolic => {
                let u = 2.0 * tau - 1.0;
                (a - b) * u * u + b
            }
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (1..=self.t_pred).map(|t| self.weight(t)).collect()
    }
}

pub fn penalty_weight(s: &PenaltySchedule, t: usize) -> f64 {
    s.weight(t)
}

/// Mean over coordinates of the elementwise loss at one time step.
pub fn base_loss(pred_t: &[f64], gt_t: &[f64], kind: BaseLoss) -> f64 {
    assert_eq!(pred_t.len(), gt_t.len(), "coordinate count mismatch");
    let n = pred_t.len() as f64;
    pred_t
        .iter()
        .zip(gt_t)
        .map(|(p, g)| {
            let d = p - g;
            match kind {
                BaseLoss::Mse => d * d,
                BaseLoss::SmoothL1 if d.abs() < 1.0 => 0.5 * d * d,
                BaseLoss::SmoothL1 => d.abs() - 0.5,
            }
        })
        .sum::<f64>()
        / n
}

/// `Σ_t w(t) · L(pred_t, gt_t)` for `[T_pred × C]` trajectories.
pub fn weighted_loss(pred: &Tensor, gt: &Tensor, s: &PenaltySchedule, kind: BaseLoss) -> Result<f64, LossError> {
    if pred.shape() != gt.shape() || pred.dims2().map(|(t, _)| t) != Some(s.t_pred) {
        return Err(LossError::Shape {
            pred: pred.shape().to_vec(),
            gt: gt.shape().to_vec(),
        });
    }
    Ok((0..s.t_pred)
        .map(|t| s.weight(t + 1) * base_loss(pred.row(t), gt.row(t), kind))
        .sum())
}

/// Smallest weighted loss over the candidate trajectories.
pub fn best_of_k_loss(samples: &[Tensor], gt: &Tensor, s: &PenaltySchedule, kind: BaseLoss) -> Result<f64, LossError> {
    if samples.is_empty() {
        return Err(LossError::NoSamples);
    }
    samples
        .iter()
        .map(|p| weighted_loss(p, gt, s, kind))
        .try_fold(f64::INFINITY, |m, l| l.map(|l| m.min(l)))
}

pub fn final_loss(traj_term: f64, kl: f64, kl_coeff: f64) -> Result<f64, LossError> {
    if kl < 0.0 || kl.is_nan() {
        return Err(LossError::NegativeKl(kl));
    }
    Ok(traj_term + kl_coeff * kl)
}

/// Per-agent weighted loss on the tape.
///
/// `pred` and `gt` are `[A × T_pred·C]` with step-major columns
/// (`t * C + c`); returns `[A × 1]`.
pub fn weighted_loss_rows(
    tape: &mut Tape,
    pred: Var,
    gt: Var,
    s: &PenaltySchedule,
    kind: BaseLoss,
    coord_dim: usize,
) -> Result<Var, LossError> {
    let shape = tape.shape(pred).to_vec();
    if shape != tape.shape(gt) || shape.len() != 2 || shape[1] != s.t_pred * coord_dim {
        return Err(LossError::Shape {
            pred: shape,
            gt: tape.shape(gt).to_vec(),
        });
    }
    let diff = tape.sub(pred, gt)?;
    let elem = match kind {
        BaseLoss::Mse => tape.square(diff),
        BaseLoss::SmoothL1 => tape.smooth_l1(diff),
    };
    let row: Vec<f64> = (0..s.t_pred)
        .flat_map(|t| std::iter::repeat_n(s.weight(t + 1) / coord_dim as f64, coord_dim))
        .collect();
    let weights = Tensor::new(&shape, row.repeat(shape[0]))?;
    let w = tape.constant(weights);
    let weighted = tape.mul(elem, w)?;
    Ok(tape.sum_rows(weighted))
}

/// Row-wise minimum over per-sample losses (`[A × 1]` each). Only the
/// selected sample receives gradient.
pub fn best_of_k_rows(tape: &mut Tape, per_sample: &[Var]) -> Result<Var, LossError> {
    let first = *per_sample.first().ok_or(LossError::NoSamples)?;
    let rows = tape.value(first).len();
    let mut choice = vec![0usize; rows];
    for r in 0..rows {
        let mut best = f64::INFINITY;
        for (k, &v) in per_sample.iter().enumerate() {
            let l = tape.value(v).data()[r];
            if l < best {
                best = l;
                choice[r] = k;
            }
        }
        tape.note_branch(choice[r] as u64);
    }
    let mut total: Option<Var> = None;
    for (k, &v) in per_sample.iter().enumerate() {
        if !choice.contains(&k) {
            continue;
        }
        let mask: Vec<f64> = choice.iter().map(|&c| if c == k { 1.0 } else { 0.0 }).collect();
        let m = tape.constant(Tensor::new(&[rows, 1], mask)?);
        let picked = tape.mul(v, m)?;
        total = Some(match total {
            None => picked,
            Some(t) => tape.add(t, picked)?,
        });
    }
    Ok(total.expect("at least one sample selected"))
}
