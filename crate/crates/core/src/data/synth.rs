//! Seeded synthetic corpora for smoke tests and overfit checks.
//!
//! Window `b` occupies frames `b·span .. (b+1)·span` with fresh agent ids, so
//! `n` generated windows yield exactly `n` complete windows at stride 1.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrajectoryRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    ConstantVelocity,
    BimodalTurn,
    Circular,
}

impl FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constant_velocity" => Ok(Self::ConstantVelocity),
            "bimodal_turn" => Ok(Self::BimodalTurn),
            "circular" => Ok(Self::Circular),
            _ => Err(format!(
                "unknown synthetic kind `{s}` (constant_velocity|bimodal_turn|circular)"
            )),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ConstantVelocity => "constant_velocity",
            Self::BimodalTurn => "bimodal_turn",
            Self::Circular => "circular",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub t_obs: usize,
    pub t_pred: usize,
    pub agents: usize,
    /// Per-step speed range in scene units.
    pub speed: (f64, f64),
    /// Start positions are drawn from `U[-spread, spread]²`.
    pub spread: f64,
    /// Bimodal headings are drawn from `U[-jitter, jitter]` around +x.
    pub heading_jitter: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            t_obs: 8,
            t_pred: 12,
            agents: 2,
            speed: (0.2, 0.5),
            spread: 3.0,
            heading_jitter: std::f64::consts::FRAC_PI_6,
        }
    }
}

impl SynthParams {
    pub fn span(&self) -> usize {
        self.t_obs + self.t_pred
    }
}

/// Positions `start + t·v` for `t = 0..frames`.
pub fn constant_velocity_track(start: [f64; 2], v: [f64; 2], frames: usize) -> Vec<[f64; 2]> {
    (0..frames)
        .map(|t| [start[0] + t as f64 * v[0], start[1] + t as f64 * v[1]])
        .collect()
}

/// The two futures (left turn, right turn) that continue a straight track
/// ending at `last` with per-step velocity `v`, flat `[t_pred·2]`.
pub fn bimodal_modes(last: [f64; 2], v: [f64; 2], t_pred: usize) -> [Vec<f64>; 2] {
    let turn = |sign: f64| {
        let d = [-sign * v[1], sign * v[0]];
        (1..=t_pred)
            .flat_map(|t| [last[0] + t as f64 * d[0], last[1] + t as f64 * d[1]])
            .collect()
    };
    [turn(1.0), turn(-1.0)]
}

fn polar(speed: f64, heading: f64) -> [f64; 2] {
    [speed * heading.cos(), speed * heading.sin()]
}

fn track(kind: SynthKind, p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let span = p.span();
    let start = [
        rng.random_range(-p.spread..=p.spread),
        rng.random_range(-p.spread..=p.spread),
    ];
    let speed = if p.speed.0 < p.speed.1 {
        rng.random_range(p.speed.0..p.speed.1)
    } else {
        p.speed.0
    };
    match kind {
        SynthKind::ConstantVelocity => {
            let v = polar(speed, rng.random_range(0.0..std::f64::consts::TAU));
            constant_velocity_track(start, v, span)
        }
        SynthKind::BimodalTurn => {
            let heading = if p.heading_jitter > 0.0 {
                rng.random_range(-p.heading_jitter..=p.heading_jitter)
            } else {
                0.0
            };
            let v = polar(speed, heading);
            let left = rng.random_bool(0.5);
            let mut pts = constant_velocity_track(start, v, p.t_obs);
            let last = pts[p.t_obs - 1];
            let mode = &bimodal_modes(last, v, p.t_pred)[usize::from(!left)];
            pts.extend(mode.chunks(2).map(|c| [c[0], c[1]]));
            pts
        }
        SynthKind::Circular => {
            let radius = rng.random_range(2.0..4.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let omega = dir * speed / radius;
            (0..span)
                .map(|t| {
                    let a = phase + omega * t as f64;
                    [start[0] + radius * a.cos(), start[1] + radius * a.sin()]
                })
                .collect()
        }
    }
}

/// Deterministic corpus of `n_windows` blocks with `p.agents` agents each.
pub fn synth_generate(kind: SynthKind, n_windows: usize, p: &SynthParams, seed: u64) -> Vec<TrajectoryRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = p.span();
    let mut out = Vec::with_capacity(n_windows * p.agents * span);
    for b in 0..n_windows {
        let tracks: Vec<Vec<[f64; 2]>> = (0..p.agents).map(|_| track(kind, p, &mut rng)).collect();
        for t in 0..span {
            for (a, tr) in tracks.iter().enumerate() {
                out.push(TrajectoryRecord {
                    frame_id: (b * span + t) as i64,
                    agent_id: (b * p.agents + a) as i64,
                    coords: tr[t].to_vec(),
                });
            }
        }
    }
    out
}
