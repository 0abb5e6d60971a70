//! Token assembly and the single-layer transformer encoders.
//!
//! Each encoder is one pre-norm block:
//! `h = x + MHA(LN₁(x))`, `y = h + W₂·gelu(W₁·LN₂(h))`.
//! Attention is unmasked across every token unless the agent encoder is
//! configured for per-agent (time-only) attention.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::params::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{stream} stream: {msg}")]
    Stream { stream: &'static str, msg: String },
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
}

impl EncoderConfig {
    pub fn new(d_model: usize, n_heads: usize, d_ffn: usize) -> Result<Self, EncoderError> {
        let cfg = Self {
            d_model,
            n_heads,
            d_ffn,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(EncoderError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ffn == 0 {
            return Err(EncoderError::Config("d_ffn must be positive".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which tokens an agent token may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionScope {
    /// Every token attends to every (agent, frame) token.
    #[default]
    Joint,
    /// Tokens attend only to the same agent's frames.
    PerAgent,
}

impl fmt::Display for AttentionScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionScope::Joint => "joint",
            AttentionScope::PerAgent => "per_agent",
        })
    }
}

impl FromStr for AttentionScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "joint" => Ok(Self::Joint),
            "per_agent" => Ok(Self::PerAgent),
            _ => Err(format!("unknown attention scope `{s}` (joint|per_agent)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenLabel {
    Agent { agent_id: i64, frame: i64 },
    Frame(i64),
}

#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Var,
    pub labels: Vec<TokenLabel>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Additive attention mask restricting agent tokens to their own agent.
    pub fn per_agent_mask(&self) -> Tensor {
        let n = self.labels.len();
        let owner = |l: &TokenLabel| match l {
            TokenLabel::Agent { agent_id, .. } => Some(*agent_id),
            TokenLabel::Frame(_) => None,
        };
        let mut mask = vec![0.0; n * n];
        for (i, li) in self.labels.iter().enumerate() {
            for (j, lj) in self.labels.iter().enumerate() {
                if owner(li) != owner(lj) {
                    mask[i * n + j] = MASKED;
                }
            }
        }
        Tensor::new(&[n, n], mask).expect("square mask")
    }
}

fn check_rows(tape: &Tape, v: Var, rows: usize, stream: &'static str) -> Result<(), EncoderError> {
    match tape.value(v).dims2() {
        Some((r, _)) if r == rows => Ok(()),
        _ => Err(EncoderError::Stream {
            stream,
            msg: format!("expected {rows} rows, got shape {:?}", tape.shape(v)),
        }),
    }
}

/// `token(a, t) = [spatial; temporal[t]; social]`, frame-major.
///
/// `spatial` and `social` are `[T·A × ·]` token rows; `temporal` is `[T × d]`.
pub fn assemble_agent_tokens(
    tape: &mut Tape,
    spatial: Var,
    temporal: &Tensor,
    social: Var,
    agent_ids: &[i64],
    frame_ids: &[i64],
) -> Result<TokenSequence, EncoderError> {
    let (a, t) = (agent_ids.len(), frame_ids.len());
    check_rows(tape, spatial, a * t, "spatial")?;
    check_rows(tape, social, a * t, "social")?;
    let (rows, d) = temporal.dims2().unwrap_or((0, 0));
    if rows != t {
        return Err(EncoderError::Stream {
            stream: "temporal",
            msg: format!("expected {t} frames, got shape {:?}", temporal.shape()),
        });
    }
    let mut tiled = Vec::with_capacity(a * t * d);
    for frame in 0..t {
        for _ in 0..a {
            tiled.extend_from_slice(temporal.row(frame));
        }
    }
    let temporal = tape.constant(Tensor::new(&[a * t, d], tiled)?);
    let tokens = tape.concat_cols(&[spatial, temporal, social])?;
    let labels = frame_ids
        .iter()
        .flat_map(|&frame| agent_ids.iter().map(move |&agent_id| TokenLabel::Agent { agent_id, frame }))
        .collect();
    Ok(TokenSequence { tokens, labels })
}

/// `token(t) = [scene_proj[t]; temporal[t]]`.
pub fn assemble_scene_tokens(
    tape: &mut Tape,
    scene_proj: Var,
    temporal: &Tensor,
    frame_ids: &[i64],
) -> Result<TokenSequence, EncoderError> {
    let t = frame_ids.len();
    check_rows(tape, scene_proj, t, "scene")?;
    if temporal.dims2().map(|(r, _)| r) != Some(t) {
        return Err(EncoderError::Stream {
            stream: "temporal",
            msg: format!("expected {t} frames, got shape {:?}", temporal.shape()),
        });
    }
    let temporal = tape.constant(temporal.clone());
    let tokens = tape.concat_cols(&[scene_proj, temporal])?;
    Ok(TokenSequence {
        tokens,
        labels: frame_ids.iter().map(|&f| TokenLabel::Frame(f)).collect(),
    })
}

/// Parameter ids of one encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let ln = |store: &mut ParamStore, name: &str| {
            (
                store.add(format!("{prefix}.{name}.gamma"), Tensor::ones(&[d])),
                store.add(format!("{prefix}.{name}.beta"), Tensor::zeros(&[d])),
            )
        };
        let (ln1_gamma, ln1_beta) = ln(store, "ln1");
        let query = Linear::new(store, &format!("{prefix}.attn.query"), d, d, rng);
        let key = Linear::new(store, &format!("{prefix}.attn.key"), d, d, rng);
        let value = Linear::new(store, &format!("{prefix}.attn.value"), d, d, rng);
        let out = Linear::new(store, &format!("{prefix}.attn.out"), d, d, rng);
        let (ln2_gamma, ln2_beta) = ln(store, "ln2");
        let ffn_in = Linear::new(store, &format!("{prefix}.ffn.0"), d, cfg.d_ffn, rng);
        let ffn_out = Linear::new(store, &format!("{prefix}.ffn.1"), cfg.d_ffn, d, rng);
        Self {
            cfg,
            ln1_gamma,
            ln1_beta,
            query,
            key,
            value,
            out,
            ln2_gamma,
            ln2_beta,
            ffn_in,
            ffn_out,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ln1_gamma, self.ln1_beta];
        for l in [self.query, self.key, self.value, self.out] {
            ids.extend([l.weight, l.bias]);
        }
        ids.extend([self.ln2_gamma, self.ln2_beta]);
        for l in [self.ffn_in, self.ffn_out] {
            ids.extend([l.weight, l.bias]);
        }
        ids
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).len()).sum()
    }

    /// `2·in·out` per linear map per token, plus `2·N²·d` each for
    /// attention scores and for applying them to values.
    pub fn flops(&self, tokens: usize) -> usize {
        let d = self.cfg.d_model;
        let linear = 4 * 2 * d * d + 2 * 2 * d * self.cfg.d_ffn;
        tokens * linear + 2 * 2 * tokens * tokens * d
    }
}

fn affine(tape: &mut Tape, bound: &Bound, x: Var, l: Linear) -> Result<Var, TensorError> {
    let y = tape.matmul(x, bound.var(l.weight))?;
    tape.add_row(y, bound.var(l.bias))
}

/// Multi-head self-attention; returns the block output and the per-head
/// attention matrices.
fn self_attention(
    tape: &mut Tape,
    bound: &Bound,
    p: &EncoderParams,
    x: Var,
    mask: Option<&Tensor>,
) -> Result<(Var, Vec<Var>), TensorError> {
    let dh = p.cfg.d_head();
    let q = affine(tape, bound, x, p.query)?;
    let k = affine(tape, bound, x, p.key)?;
    let v = affine(tape, bound, x, p.value)?;
    let mask = mask.map(|m| tape.constant(m.clone()));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.cfg.n_heads);
    let mut weights = Vec::with_capacity(p.cfg.n_heads);
    for h in 0..p.cfg.n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let attn = tape.softmax(scores);
        weights.push(attn);
        heads.push(tape.matmul_stable(attn, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    Ok((affine(tape, bound, merged, p.out)?, weights))
}

fn encoder_block(
    tape: &mut Tape,
    bound: &Bound,
    p: &EncoderParams,
    x: Var,
    mask: Option<&Tensor>,
) -> Result<(Var, Vec<Var>), EncoderError> {
    let width = tape.value(x).last_dim();
    if width != p.cfg.d_model || tape.value(x).rank() != 2 {
        return Err(EncoderError::Stream {
            stream: "tokens",
            msg: format!("token width {width} != d_model {}", p.cfg.d_model),
        });
    }
    let n1 = tape.layer_norm(x, bound.var(p.ln1_gamma), bound.var(p.ln1_beta), LAYER_NORM_EPS)?;
    let (attn, weights) = self_attention(tape, bound, p, n1, mask)?;
    let h = tape.add(x, attn)?;
    let n2 = tape.layer_norm(h, bound.var(p.ln2_gamma), bound.var(p.ln2_beta), LAYER_NORM_EPS)?;
    let f = affine(tape, bound, n2, p.ffn_in)?;
    let f = tape.gelu(f);
    let f = affine(tape, bound, f, p.ffn_out)?;
    Ok((tape.add(h, f)?, weights))
}

/// Runs the encoder block over `tokens` (`[N × d_model]`).
pub fn encoder_forward(
    tape: &mut Tape,
    bound: &Bound,
    p: &EncoderParams,
    tokens: Var,
    mask: Option<&Tensor>,
) -> Result<Var, EncoderError> {
    encoder_block(tape, bound, p, tokens, mask).map(|(y, _)| y)
}

/// Per-head attention matrices `[N × N]` for inspection.
pub fn attention_weights(
    tape: &mut Tape,
    bound: &Bound,
    p: &EncoderParams,
    tokens: Var,
    mask: Option<&Tensor>,
) -> Result<Vec<Tensor>, EncoderError> {
    let (_, w) = encoder_block(tape, bound, p, tokens, mask)?;
    Ok(w.into_iter().map(|v| tape.value(v).clone()).collect())
}
