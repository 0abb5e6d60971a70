//! Displacement and bounding-box error metrics plus dataset aggregation.
//!
//! Trajectories are flat step-major slices: `[T × 2]` points for top-down
//! data and `[T × 4]` boxes `(x1, y1, x2, y2)` for camera data.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{what}: prediction has {pred} values, ground truth {gt}")]
    LengthMismatch { what: &'static str, pred: usize, gt: usize },
    #[error("{what}: trajectory is empty or not a multiple of {coord_dim} coordinates")]
    BadLayout { what: &'static str, coord_dim: usize },
    #[error("no samples supplied")]
    NoSamples,
    #[error("unsupported coordinate dimension {0}")]
    CoordDim(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

type Result<T> = std::result::Result<T, MetricsError>;

fn check(what: &'static str, pred: &[f64], gt: &[f64], c: usize) -> Result<usize> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            what,
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if pred.is_empty() || !pred.len().is_multiple_of(c) {
        return Err(MetricsError::BadLayout { what, coord_dim: c });
    }
    Ok(pred.len() / c)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn ade(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let t = check("ade", pred, gt, 2)?;
    let total: f64 = pred.chunks(2).zip(gt.chunks(2)).map(|(p, g)| dist2(p, g)).sum();
    Ok(total / t as f64)
}

pub fn fde(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let t = check("fde", pred, gt, 2)?;
    let i = 2 * (t - 1);
    Ok(dist2(&pred[i..], &gt[i..]))
}

fn min_over<'a>(samples: impl IntoIterator<Item = &'a [f64]>, f: impl Fn(&[f64]) -> Result<f64>) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (k, s) in samples.into_iter().enumerate() {
        let v = f(s)?;
        if best.is_none_or(|(b, _)| v < b) {
            best = Some((v, k));
        }
    }
    best.ok_or(MetricsError::NoSamples)
}

/// Best ADE over the samples and the index of the sample achieving it.
pub fn min_ade_k<'a>(samples: impl IntoIterator<Item = &'a [f64]>, gt: &[f64]) -> Result<(f64, usize)> {
    min_over(samples, |s| ade(s, gt))
}

pub fn min_fde_k<'a>(samples: impl IntoIterator<Item = &'a [f64]>, gt: &[f64]) -> Result<(f64, usize)> {
    min_over(samples, |s| fde(s, gt))
}

pub fn bbox_centroid(bbox: [f64; 4]) -> [f64; 2] {
    [(bbox[0] + bbox[2]) / 2.0, (bbox[1] + bbox[3]) / 2.0]
}

/// Centroid sequence `[T × 2]` of a box sequence `[T × 4]`.
pub fn centroids(boxes: &[f64]) -> Vec<f64> {
    boxes
        .chunks_exact(4)
        .flat_map(|b| bbox_centroid([b[0], b[1], b[2], b[3]]))
        .collect()
}

/// `(CADE, CFDE)`: ADE and FDE of the box centroids.
pub fn cade_cfde(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    check("cade", pred, gt, 4)?;
    let (p, g) = (centroids(pred), centroids(gt));
    Ok((ade(&p, &g)?, fde(&p, &g)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArbVariant {
    /// Mean over steps of the per-step RMSE across the four coordinates.
    #[default]
    MeanOfRmse,
    /// RMSE over all steps and coordinates at once.
    JointRmse,
}

impl FromStr for ArbVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean-of-rmse" => Ok(Self::MeanOfRmse),
            "joint-rmse" => Ok(Self::JointRmse),
            _ => Err(format!("unknown ARB variant `{s}` (expected mean-of-rmse or joint-rmse)")),
        }
    }
}

impl fmt::Display for ArbVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MeanOfRmse => "mean-of-rmse",
            Self::JointRmse => "joint-rmse",
        })
    }
}

/// `(ARB, FRB)` over box coordinates.
pub fn arb_frb(pred: &[f64], gt: &[f64], variant: ArbVariant) -> Result<(f64, f64)> {
    let t = check("arb", pred, gt, 4)?;
    let sq: Vec<f64> = pred
        .chunks(4)
        .zip(gt.chunks(4))
        .map(|(p, g)| p.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .collect();
    let frb = (sq[t - 1] / 4.0).sqrt();
    let arb = match variant {
        ArbVariant::MeanOfRmse => sq.iter().map(|s| (s / 4.0).sqrt()).sum::<f64>() / t as f64,
        ArbVariant::JointRmse => (sq.iter().sum::<f64>() / (4 * t) as f64).sqrt(),
    };
    Ok((arb, frb))
}

/// One agent in one window: the point forecast, the sampled pool (the
/// point forecast alone in deterministic mode) and the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentForecast<'a> {
    pub scene: &'a str,
    pub point: &'a [f64],
    pub samples: Vec<&'a [f64]>,
    pub gt: &'a [f64],
    pub coord_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricValues {
    pub ade: Option<f64>,
    pub fde: Option<f64>,
    pub min_ade_k: Option<f64>,
    pub min_fde_k: Option<f64>,
    pub cade: Option<f64>,
    pub cfde: Option<f64>,
    pub arb: Option<f64>,
    pub frb: Option<f64>,
}

pub const METRIC_NAMES: [&str; 8] = ["ade", "fde", "min_ade_k", "min_fde_k", "cade", "cfde", "arb", "frb"];

impl MetricValues {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "ade" => self.ade,
            "fde" => self.fde,
            "min_ade_k" => self.min_ade_k,
            "min_fde_k" => self.min_fde_k,
            "cade" => self.cade,
            "cfde" => self.cfde,
            "arb" => self.arb,
            "frb" => self.frb,
            _ => None,
        }
    }

    fn slot(&mut self, name: &str) -> Option<&mut Option<f64>> {
        Some(match name {
            "ade" => &mut self.ade,
            "fde" => &mut self.fde,
            "min_ade_k" => &mut self.min_ade_k,
            "min_fde_k" => &mut self.min_fde_k,
            "cade" => &mut self.cade,
            "cfde" => &mut self.cfde,
            "arb" => &mut self.arb,
            "frb" => &mut self.frb,
            _ => return None,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        METRIC_NAMES.iter().filter_map(|n| self.get(n).map(|v| (*n, v)))
    }
}

/// Per-agent metric values for one forecast.
pub fn agent_metrics(f: &AgentForecast<'_>, arb: ArbVariant) -> Result<MetricValues> {
    if f.samples.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    let mut m = MetricValues::default();
    match f.coord_dim {
        2 => {
            m.ade = Some(ade(f.point, f.gt)?);
            m.fde = Some(fde(f.point, f.gt)?);
            m.min_ade_k = Some(min_ade_k(f.samples.iter().copied(), f.gt)?.0);
            m.min_fde_k = Some(min_fde_k(f.samples.iter().copied(), f.gt)?.0);
        }
        4 => {
            let (c, cf) = cade_cfde(f.point, f.gt)?;
            let (a, fr) = arb_frb(f.point, f.gt, arb)?;
            m.cade = Some(c);
            m.cfde = Some(cf);
            m.arb = Some(a);
            m.frb = Some(fr);
            let gt_c = centroids(f.gt);
            let cs: Vec<Vec<f64>> = f.samples.iter().map(|s| centroids(s)).collect();
            for s in &f.samples {
                check("min_ade_k", s, f.gt, 4)?;
            }
            m.min_ade_k = Some(min_ade_k(cs.iter().map(Vec::as_slice), &gt_c)?.0);
            m.min_fde_k = Some(min_fde_k(cs.iter().map(Vec::as_slice), &gt_c)?.0);
        }
        c => return Err(MetricsError::CoordDim(c)),
    }
    Ok(m)
}

#[derive(Debug, Clone, Default)]
struct Sums {
    totals: [f64; 8],
    counts: [usize; 8],
}

impl Sums {
    fn push(&mut self, m: &MetricValues) {
        for (i, n) in METRIC_NAMES.iter().enumerate() {
            if let Some(v) = m.get(n) {
                self.totals[i] += v;
                self.counts[i] += 1;
            }
        }
    }

    fn means(&self) -> MetricValues {
        let mut out = MetricValues::default();
        for (i, n) in METRIC_NAMES.iter().enumerate() {
            if self.counts[i] > 0 {
                *out.slot(n).unwrap() = Some(self.totals[i] / self.counts[i] as f64);
            }
        }
        out
    }
}

/// Accumulates per-agent metrics in insertion order.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    arb: ArbVariant,
    all: Sums,
    scenes: BTreeMap<String, Sums>,
    n: usize,
}

impl MetricsAccumulator {
    pub fn new(arb: ArbVariant) -> Self {
        Self {
            arb,
            ..Self::default()
        }
    }

    pub fn push(&mut self, f: &AgentForecast<'_>) -> Result<MetricValues> {
        let m = agent_metrics(f, self.arb)?;
        self.all.push(&m);
        self.scenes.entry(f.scene.to_string()).or_default().push(&m);
        self.n += 1;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn finish(self, k_used: usize) -> MetricsReport {
        let per_scene: BTreeMap<String, MetricValues> = self.scenes.iter().map(|(k, s)| (k.clone(), s.means())).collect();
        let mut scene_sums = Sums::default();
        for m in per_scene.values() {
            scene_sums.push(m);
        }
        MetricsReport {
            sample_averaged: self.all.means(),
            scene_averaged: scene_sums.means(),
            per_scene,
            k_used,
            n_samples_evaluated: self.n,
            arb_variant: self.arb,
        }
    }
}

/// Dataset-level metrics. `sample_averaged` is the unweighted mean over all
/// (window, agent) pairs; `scene_averaged` first averages within each scene.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub sample_averaged: MetricValues,
    pub scene_averaged: MetricValues,
    pub per_scene: BTreeMap<String, MetricValues>,
    pub k_used: usize,
    pub n_samples_evaluated: usize,
    pub arb_variant: ArbVariant,
}

impl MetricsReport {
    pub fn ade(&self) -> Option<f64> {
        self.sample_averaged.ade
    }

    pub fn fde(&self) -> Option<f64> {
        self.sample_averaged.fde
    }

    pub fn min_ade_k(&self) -> Option<f64> {
        self.sample_averaged.min_ade_k
    }

    pub fn min_fde_k(&self) -> Option<f64> {
        self.sample_averaged.min_fde_k
    }

    /// Flat `key = value` block. Floats use the shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "k_used = {}", self.k_used);
        let _ = writeln!(s, "n_samples_evaluated = {}", self.n_samples_evaluated);
        let _ = writeln!(s, "arb_variant = {}", self.arb_variant);
        for (n, v) in self.sample_averaged.iter() {
            let _ = writeln!(s, "{n} = {v}");
        }
        for (n, v) in self.scene_averaged.iter() {
            let _ = writeln!(s, "scene_avg.{n} = {v}");
        }
        for (scene, m) in &self.per_scene {
            for (n, v) in m.iter() {
                let _ = writeln!(s, "scene.{scene}.{n} = {v}");
            }
        }
        s
    }

    /// One metric per line: `name value count`.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (n, v) in self.sample_averaged.iter() {
            let _ = writeln!(s, "{n} {v} {}", self.n_samples_evaluated);
        }
        let n_scenes = self.per_scene.len();
        for (n, v) in self.scene_averaged.iter() {
            let _ = writeln!(s, "scene_avg.{n} {v} {n_scenes}");
        }
        s
    }

    /// Parses the output of [`MetricsReport::to_text`].
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut r = MetricsReport {
            sample_averaged: MetricValues::default(),
            scene_averaged: MetricValues::default(),
            per_scene: BTreeMap::new(),
            k_used: 0,
            n_samples_evaluated: 0,
            arb_variant: ArbVariant::default(),
        };
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| MetricsError::Parse { line: line_no, msg };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let num = || value.parse::<f64>().map_err(|_| err(format!("bad number `{value}`")));
            let unknown = || err(format!("unknown key `{key}`"));
            match key {
                "k_used" => r.k_used = value.parse().map_err(|_| err(format!("bad count `{value}`")))?,
                "n_samples_evaluated" => {
                    r.n_samples_evaluated = value.parse().map_err(|_| err(format!("bad count `{value}`")))?
                }
                "arb_variant" => r.arb_variant = value.parse().map_err(err)?,
                _ => {
                    if let Some(name) = key.strip_prefix("scene_avg.") {
                        *r.scene_averaged.slot(name).ok_or_else(unknown)? = Some(num()?);
                    } else if let Some(rest) = key.strip_prefix("scene.") {
                        let (scene, name) = rest.rsplit_once('.').ok_or_else(unknown)?;
                        let entry = r.per_scene.entry(scene.to_string()).or_default();
                        *entry.slot(name).ok_or_else(unknown)? = Some(num()?);
                    } else {
                        *r.sample_averaged.slot(key).ok_or_else(unknown)? = Some(num()?);
                    }
                }
            }
        }
        Ok(r)
    }
}
