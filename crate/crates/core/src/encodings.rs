//! The four embedding streams fed to the encoders.
//!
//! Agent-side tensors are laid out as token rows in frame-major order:
//! row `t * A + a` belongs to agent `a` at observed frame `t`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::graph::{build_social_graph, rwpe, GraphError};
use crate::tensor::{mlp_forward, LayerRef, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{0}")]
    Config(String),
    #[error("scene latents cover {got} frames, window observes {expected}")]
    FrameMismatch { expected: usize, got: usize },
}

/// How the dimension index enters the temporal-encoding frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TemporalIndex {
    /// `10000^(2i/d)` with `i` the dimension index itself.
    #[default]
    Literal,
    /// `10000^(2⌊i/2⌋/d)`: sin/cos pairs share one frequency.
    Pair,
}

impl fmt::Display for TemporalIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemporalIndex::Literal => "literal",
            TemporalIndex::Pair => "pair",
        })
    }
}

impl FromStr for TemporalIndex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "literal" => Ok(Self::Literal),
            "pair" => Ok(Self::Pair),
            _ => Err(format!("unknown temporal index convention `{s}` (literal|pair)")),
        }
    }
}

pub fn temporal_encoding(t: usize, d: usize) -> Vec<f64> {
    temporal_encoding_with(t, d, TemporalIndex::Literal)
}

pub fn temporal_encoding_with(t: usize, d: usize, index: TemporalIndex) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let k = match index {
                TemporalIndex::Literal => i,
                TemporalIndex::Pair => i - i % 2,
            };
            let arg = t as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            if i % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

/// `[frames × d]` table for time steps `0..frames`.
pub fn temporal_table(frames: usize, d: usize, index: TemporalIndex) -> Tensor {
    let data = (0..frames).flat_map(|t| temporal_encoding_with(t, d, index)).collect();
    Tensor::new(&[frames, d], data).expect("temporal table shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingConfig {
    pub d_temporal: usize,
    pub d_spatial: usize,
    pub d_social: usize,
    pub d_scene: usize,
    pub coord_dim: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            d_temporal: 16,
            d_spatial: 32,
            d_social: 16,
            d_scene: 48,
            coord_dim: 2,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<(), EncodingError> {
        let dims = [self.d_temporal, self.d_spatial, self.d_social, self.d_scene];
        if dims.iter().any(|&d| d < 2) {
            return Err(EncodingError::Config(format!("embedding widths must be >= 2: {dims:?}")));
        }
        if !self.d_temporal.is_multiple_of(2) {
            return Err(EncodingError::Config(format!("d_temporal must be even, got {}", self.d_temporal)));
        }
        if self.coord_dim != 2 && self.coord_dim != 4 {
            return Err(EncodingError::Config(format!("coord_dim must be 2 or 4, got {}", self.coord_dim)));
        }
        Ok(())
    }

    pub fn agent_token_dim(&self) -> usize {
        self.d_spatial + self.d_temporal + self.d_social
    }

    pub fn scene_token_dim(&self) -> usize {
        self.d_scene + self.d_temporal
    }
}

/// Reorders `[A × T × C]` coordinates into frame-major token rows `[T·A × C]`.
pub fn frame_major_rows(coords: &Tensor) -> Result<Tensor, EncodingError> {
    let [a, t, c] = dims3(coords, "coords")?;
    let src = coords.data();
    let mut out = Vec::with_capacity(src.len());
    for frame in 0..t {
        for agent in 0..a {
            let base = (agent * t + frame) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    Ok(Tensor::new(&[t * a, c], out)?)
}

fn dims3(x: &Tensor, what: &str) -> Result<[usize; 3], EncodingError> {
    match x.shape() {
        [a, t, c] => Ok([*a, *t, *c]),
        s => Err(EncodingError::Config(format!("{what} must be [A × T × C], got {s:?}"))),
    }
}

/// Planar position used for the social graph: the point itself, or the
/// bounding-box centroid for 4-coordinate boxes.
pub fn planar_position(coords: &[f64]) -> [f64; 2] {
    match coords {
        [x, y] => [*x, *y],
        [x1, y1, x2, y2] => [(x1 + x2) / 2.0, (y1 + y2) / 2.0],
        other => panic!("unsupported coordinate layout of length {}", other.len()),
    }
}

/// Per-frame RWPE rows, frame-major `[T·A × k]`.
pub fn social_rows(obs: &Tensor, k: usize, eps_dist: f64) -> Result<Tensor, EncodingError> {
    let [a, t, c] = dims3(obs, "obs")?;
    let src = obs.data();
    let mut out = Vec::with_capacity(t * a * k);
    for frame in 0..t {
        let points: Vec<[f64; 2]> = (0..a)
            .map(|agent| {
                let base = (agent * t + frame) * c;
                planar_position(&src[base..base + c])
            })
            .collect();
        let g = build_social_graph(&points, eps_dist)?;
        out.extend(rwpe(&g, k)?.values);
    }
    Ok(Tensor::new(&[t * a, k], out)?)
}

/// Γ_Spatial applied tokenwise to `[A × T × C]` coordinates.
pub fn embed_spatial(tape: &mut Tape, coords: &Tensor, mlp: &[LayerRef]) -> Result<Var, EncodingError> {
    let rows = frame_major_rows(coords)?;
    let x = tape.constant(rows);
    Ok(mlp_forward(tape, x, mlp)?)
}

/// Γ_Social applied to RWPE rows `[N × k]`.
pub fn embed_social(tape: &mut Tape, rwpe_rows: &Tensor, mlp: &[LayerRef]) -> Result<Var, EncodingError> {
    let x = tape.constant(rwpe_rows.clone());
    Ok(mlp_forward(tape, x, mlp)?)
}

/// Γ_Scene applied framewise to `[T × d_latent]` latents.
pub fn project_scene(
    tape: &mut Tape,
    latent: &Tensor,
    t_obs: usize,
    mlp: &[LayerRef],
) -> Result<Var, EncodingError> {
    let frames = latent.dims2().map_or(0, |(r, _)| r);
    if frames != t_obs {
        return Err(EncodingError::FrameMismatch {
            expected: t_obs,
            got: frames,
        });
    }
    let x = tape.constant(latent.clone());
    Ok(mlp_forward(tape, x, mlp)?)
}
