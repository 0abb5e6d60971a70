//! Trajectory tables, observation/prediction windows and centering.

mod augment;
mod manifest;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

pub use augment::{augment, augment_seeded, rigid_transform, AugmentConfig};
pub use manifest::{
    attach_latents, leave_one_out_split, occupancy_latents, parse_manifest, read_manifest, LatentSource, ManifestEntry,
    SceneData, SplitPlan,
};
pub use synth::{bimodal_modes, constant_velocity_track, synth_generate, SynthKind, SynthParams};

use crate::encodings::planar_position;
use crate::scene::SceneError;
use crate::tensor::{canonical_sum, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate record for frame {frame}, agent {agent} (lines {first} and {second})")]
    Duplicate {
        frame: i64,
        agent: i64,
        first: usize,
        second: usize,
    },
    #[error("frame numbering has a gap between frames {before} and {after} (step {step}); enable resampling to re-index")]
    FrameGap { before: i64, after: i64, step: i64 },
    #[error("unknown scene `{name}`; valid scenes: {valid}")]
    UnknownScene { name: String, valid: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Coordinate layout of a trajectory table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layout {
    /// `frame agent x y`
    #[default]
    FrameAgentXy,
    /// `frame agent x1 y1 x2 y2`
    FrameAgentBbox,
}

impl Layout {
    pub fn coord_dim(self) -> usize {
        match self {
            Layout::FrameAgentXy => 2,
            Layout::FrameAgentBbox => 4,
        }
    }

    pub fn from_coord_dim(c: usize) -> Option<Self> {
        match c {
            2 => Some(Layout::FrameAgentXy),
            4 => Some(Layout::FrameAgentBbox),
            _ => None,
        }
    }
}

impl FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "xy" | "frame_agent_xy" => Ok(Layout::FrameAgentXy),
            "bbox" | "frame_agent_bbox" => Ok(Layout::FrameAgentBbox),
            _ => Err(format!("unknown layout `{s}` (xy|bbox)")),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::FrameAgentXy => "xy",
            Layout::FrameAgentBbox => "bbox",
        })
    }
}

/// Whether planar fields are stored `x y` or `y x` in the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColumnOrder {
    #[default]
    Xy,
    Yx,
}

impl FromStr for ColumnOrder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "xy" => Ok(ColumnOrder::Xy),
            "yx" => Ok(ColumnOrder::Yx),
            _ => Err(format!("unknown column order `{s}` (xy|yx)")),
        }
    }
}

impl fmt::Display for ColumnOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnOrder::Xy => "xy",
            ColumnOrder::Yx => "yx",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub frame_id: i64,
    pub agent_id: i64,
    pub coords: Vec<f64>,
}

fn parse_id(field: &str) -> Option<i64> {
    if let Ok(v) = field.parse::<i64>() {
        return Some(v);
    }
    // tables exported from float matrices write ids like `780.0`
    let v = field.parse::<f64>().ok()?;
    (v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

/// Parses comma- or whitespace-separated rows, sorted by `(frame, agent)`.
pub fn parse_trajectory_table(text: &str, layout: Layout, order: ColumnOrder) -> Result<Vec<TrajectoryRecord>> {
    let c = layout.coord_dim();
    let mut seen: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed
            .split(|ch: char| ch == ',' || ch.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != c + 2 {
            return Err(DataError::Parse {
                line,
                msg: format!("expected {} columns for {layout} layout, found {}", c + 2, fields.len()),
            });
        }
        let bad = |what: &str, f: &str| DataError::Parse {
            line,
            msg: format!("bad {what} `{f}`"),
        };
        let frame_id = parse_id(fields[0]).ok_or_else(|| bad("frame id", fields[0]))?;
        let agent_id = parse_id(fields[1]).ok_or_else(|| bad("agent id", fields[1]))?;
        let mut coords = fields[2..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    // adding +0.0 turns -0.0 into +0.0
                    .map(|v| v + 0.0)
                    .ok_or_else(|| bad("coordinate", f))
            })
            .collect::<Result<Vec<f64>>>()?;
        if order == ColumnOrder::Yx {
            for pair in coords.chunks_mut(2) {
                pair.swap(0, 1);
            }
        }
        if let Some(&first) = seen.get(&(frame_id, agent_id)) {
            return Err(DataError::Duplicate {
                frame: frame_id,
                agent: agent_id,
                first,
                second: line,
            });
        }
        seen.insert((frame_id, agent_id), line);
        records.push(TrajectoryRecord {
            frame_id,
            agent_id,
            coords,
        });
    }
    records.sort_by_key(|r| (r.frame_id, r.agent_id));
    Ok(records)
}

pub fn load_trajectory_table(path: &Path, layout: Layout, order: ColumnOrder) -> Result<Vec<TrajectoryRecord>> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_trajectory_table(&text, layout, order)
}

/// Writes records as `frame agent coords...` rows in the standard `x y` order.
pub fn records_to_text(records: &[TrajectoryRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = write!(s, "{} {}", r.frame_id, r.agent_id);
        for v in &r.coords {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    pub stride: usize,
    /// Re-index distinct frame ids as consecutive instead of rejecting gaps.
    pub resample_gaps: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            t_obs: 8,
            t_pred: 12,
            stride: 1,
            resample_gaps: false,
        }
    }
}

/// One observation/prediction window of complete agent tracks, centered.
///
/// `obs` is `[A × T_obs × C]` and `future` is `[A × T_pred × C]` (absent for
/// observation-only windows). Agents are ordered by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryWindow {
    pub scene: String,
    pub obs: Tensor,
    pub future: Option<Tensor>,
    pub frame_ids: Vec<i64>,
    pub agent_ids: Vec<i64>,
    pub centering_offset: Vec<f64>,
    /// Per observed frame scene latent, `[T_obs × D]`.
    pub scene_latents: Option<Tensor>,
}

impl TrajectoryWindow {
    pub fn n_agents(&self) -> usize {
        self.obs.shape()[0]
    }

    pub fn t_obs(&self) -> usize {
        self.obs.shape()[1]
    }

    pub fn t_pred(&self) -> usize {
        self.future.as_ref().map_or(0, |f| f.shape()[1])
    }

    pub fn coord_dim(&self) -> usize {
        self.obs.shape()[2]
    }

    /// Coordinates of agent `a` at observed step `t`.
    pub fn obs_at(&self, a: usize, t: usize) -> &[f64] {
        let (tt, c) = (self.t_obs(), self.coord_dim());
        &self.obs.data()[(a * tt + t) * c..(a * tt + t + 1) * c]
    }

    /// `[A × C]` coordinates at the last observed frame.
    pub fn last_observed(&self) -> Tensor {
        let (a, t) = (self.n_agents(), self.t_obs());
        let data = (0..a).flat_map(|i| self.obs_at(i, t - 1).to_vec()).collect();
        Tensor::new(&[a, self.coord_dim()], data).expect("non-empty window")
    }

    /// Flat step-major ground truth `[T_pred·C]` of agent `a`.
    pub fn future_of(&self, a: usize) -> Option<&[f64]> {
        let f = self.future.as_ref()?;
        let len = f.shape()[1] * f.shape()[2];
        Some(&f.data()[a * len..(a + 1) * len])
    }

    /// `[A × T_pred·C]` future rows.
    pub fn future_rows(&self) -> Option<Tensor> {
        let f = self.future.as_ref()?;
        let s = f.shape();
        Some(Tensor::new(&[s[0], s[1] * s[2]], f.data().to_vec()).expect("future"))
    }

    /// Adds the centering offset back: `(obs, future)` in raw coordinates.
    pub fn uncentered(&self) -> (Tensor, Option<Tensor>) {
        let o = &self.centering_offset;
        let add = |t: &Tensor| {
            let mut t = t.clone();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += o[i % o.len()];
            }
            t
        };
        (add(&self.obs), self.future.as_ref().map(add))
    }

    /// Raw records covered by this window.
    pub fn to_records(&self) -> Vec<TrajectoryRecord> {
        let (obs, fut) = self.uncentered();
        let (t_obs, c) = (self.t_obs(), self.coord_dim());
        let t_pred = self.t_pred();
        let mut out = Vec::new();
        for (fi, &frame_id) in self.frame_ids.iter().enumerate() {
            for (a, &agent_id) in self.agent_ids.iter().enumerate() {
                let coords = if fi < t_obs {
                    obs.data()[(a * t_obs + fi) * c..][..c].to_vec()
                } else if let Some(f) = &fut {
                    let s = fi - t_obs;
                    f.data()[(a * t_pred + s) * c..][..c].to_vec()
                } else {
                    continue;
                };
                out.push(TrajectoryRecord {
                    frame_id,
                    agent_id,
                    coords,
                });
            }
        }
        out
    }

    /// Same window with agents reordered: row `i` of the result is row
    /// `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> TrajectoryWindow {
        let reorder = |t: &Tensor| {
            let s = t.shape().to_vec();
            let len = s[1] * s[2];
            let data = perm.iter().flat_map(|&p| t.data()[p * len..(p + 1) * len].to_vec()).collect();
            Tensor::new(&s, data).expect("permutation keeps shape")
        };
        TrajectoryWindow {
            obs: reorder(&self.obs),
            future: self.future.as_ref().map(reorder),
            agent_ids: perm.iter().map(|&p| self.agent_ids[p]).collect(),
            ..self.clone()
        }
    }
}

/// Planar reference point of one agent's coordinates, repeated to fill the
/// coordinate layout (`[cx, cy]` or `[cx, cy, cx, cy]`).
fn tiled_mean(points: &[[f64; 2]], c: usize) -> Vec<f64> {
    let n = points.len() as f64;
    let mut xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let mut ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
    let m = [canonical_sum(&mut xs) / n, canonical_sum(&mut ys) / n];
    (0..c).map(|i| m[i % 2]).collect()
}

fn round_trips(values: &[f64], offset: &[f64]) -> bool {
    values
        .iter()
        .enumerate()
        .all(|(i, &x)| (x - offset[i % offset.len()]) + offset[i % offset.len()] == x)
}

/// Subtracts the mean planar position at the last observed frame.
///
/// Floating-point subtraction is not always invertible, so the offset is the
/// exact mean when that round-trips every coordinate, else the mean snapped
/// to a multiple of 1/64, else zero. Whatever is chosen, adding the stored
/// offset back reproduces the raw values exactly.
pub fn center_window(mut w: TrajectoryWindow) -> TrajectoryWindow {
    let (a, t, c) = (w.n_agents(), w.t_obs(), w.coord_dim());
    debug_assert!(w.centering_offset.iter().all(|&o| o == 0.0), "window is already centered");
    let last: Vec<[f64; 2]> = (0..a).map(|i| planar_position(w.obs_at(i, t - 1))).collect();
    let exact = tiled_mean(&last, c);
    let snapped: Vec<f64> = exact.iter().map(|m| (m * 64.0).round() / 64.0).collect();
    let all: Vec<f64> = w
        .obs
        .data()
        .iter()
        .chain(w.future.iter().flat_map(|f| f.data().iter()))
        .copied()
        .collect();
    let offset = [exact, snapped]
        .into_iter()
        .find(|o| round_trips(&all, o))
        .unwrap_or_else(|| vec![0.0; c]);
    let sub = |t: &mut Tensor| {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v -= offset[i % c];
        }
    };
    sub(&mut w.obs);
    if let Some(f) = w.future.as_mut() {
        sub(f);
    }
    w.centering_offset = offset;
    w
}

/// Distinct frame ids mapped to positions on a uniform grid.
fn frame_positions(frames: &BTreeSet<i64>, resample: bool) -> Result<Vec<i64>> {
    let list: Vec<i64> = frames.iter().copied().collect();
    if resample || list.len() < 2 {
        return Ok(list);
    }
    let step = list.windows(2).map(|w| w[1] - w[0]).min().unwrap();
    if let Some(w) = list.windows(2).find(|w| w[1] - w[0] != step) {
        return Err(DataError::FrameGap {
            before: w[0],
            after: w[1],
            step,
        });
    }
    Ok(list)
}

/// Sliding windows over the sorted distinct frames of one scene.
///
/// The frame step is the smallest difference between distinct frame ids; any
/// larger jump is a gap. Agents missing from any frame of a window are left
/// out of that window and windows with no complete agent are skipped.
pub fn build_windows(scene: &str, records: &[TrajectoryRecord], cfg: WindowConfig) -> Result<Vec<TrajectoryWindow>> {
    if cfg.t_obs == 0 || cfg.t_pred == 0 || cfg.stride == 0 {
        return Err(DataError::Invalid("t_obs, t_pred and stride must be >= 1".into()));
    }
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let c = first.coords.len();
    if records.iter().any(|r| r.coords.len() != c) {
        return Err(DataError::Invalid("records mix coordinate layouts".into()));
    }
    let mut by_frame: BTreeMap<i64, BTreeMap<i64, &[f64]>> = BTreeMap::new();
    for r in records {
        if by_frame.entry(r.frame_id).or_default().insert(r.agent_id, &r.coords).is_some() {
            return Err(DataError::Invalid(format!(
                "duplicate record for frame {}, agent {}",
                r.frame_id, r.agent_id
            )));
        }
    }
    let frames = frame_positions(&by_frame.keys().copied().collect(), cfg.resample_gaps)?;
    let span = cfg.t_obs + cfg.t_pred;
    let mut windows = Vec::new();
    let mut start = 0;
    while start + span <= frames.len() {
        let ids = &frames[start..start + span];
        let maps: Vec<&BTreeMap<i64, &[f64]>> = ids.iter().map(|f| &by_frame[f]).collect();
        let agents: Vec<i64> = maps[0]
            .keys()
            .copied()
            .filter(|a| maps.iter().all(|m| m.contains_key(a)))
            .collect();
        if !agents.is_empty() {
            let gather = |range: std::ops::Range<usize>| {
                let data: Vec<f64> = agents
                    .iter()
                    .flat_map(|a| maps[range.clone()].iter().flat_map(move |m| m[a].iter().copied()))
                    .collect();
                Tensor::new(&[agents.len(), range.len(), c], data).expect("window shape")
            };
            let raw = TrajectoryWindow {
                scene: scene.to_string(),
                obs: gather(0..cfg.t_obs),
                future: Some(gather(cfg.t_obs..span)),
                frame_ids: ids.to_vec(),
                agent_ids: agents,
                centering_offset: vec![0.0; c],
                scene_latents: None,
            };
            windows.push(center_window(raw));
        }
        start += cfg.stride;
    }
    Ok(windows)
}

/// Observation-only window from records covering exactly `t_obs` frames.
pub fn observation_window(scene: &str, records: &[TrajectoryRecord], t_obs: usize) -> Result<TrajectoryWindow> {
    let frames: BTreeSet<i64> = records.iter().map(|r| r.frame_id).collect();
    if frames.len() != t_obs {
        return Err(DataError::Invalid(format!(
            "window file covers {} frames, model observes {t_obs}",
            frames.len()
        )));
    }
    let frames = frame_positions(&frames, false)?;
    let c = records[0].coords.len();
    let agents: BTreeSet<i64> = records.iter().map(|r| r.agent_id).collect();
    let lookup: BTreeMap<(i64, i64), &[f64]> =
        records.iter().map(|r| ((r.agent_id, r.frame_id), r.coords.as_slice())).collect();
    let mut data = Vec::new();
    for &a in &agents {
        for &f in &frames {
            let v = lookup.get(&(a, f)).ok_or_else(|| {
                DataError::Invalid(format!("agent {a} is missing at frame {f}; every agent needs a complete track"))
            })?;
            if v.len() != c {
                return Err(DataError::Invalid("records mix coordinate layouts".into()));
            }
            data.extend_from_slice(v);
        }
    }
    let raw = TrajectoryWindow {
        scene: scene.to_string(),
        obs: Tensor::new(&[agents.len(), t_obs, c], data).map_err(|e| DataError::Invalid(e.to_string()))?,
        future: None,
        frame_ids: frames,
        agent_ids: agents.into_iter().collect(),
        centering_offset: vec![0.0; c],
        scene_latents: None,
    };
    Ok(center_window(raw))
}
