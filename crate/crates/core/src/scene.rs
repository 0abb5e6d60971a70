//! Per-frame scene latent vectors.
//!
//! Latents come from a text table (so any external image encoder can be
//! dropped in), from a coarse occupancy grid over agent positions, or are
//! all zeros for the no-scene ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const DEFAULT_LATENT_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("latent dim {got} does not match expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("frame {0} listed twice")]
    DuplicateFrame(i64),
    #[error("no scene latent for frame {0}")]
    MissingFrame(i64),
    #[error("degenerate bounds {0:?}")]
    DegenerateBounds(Bounds),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneLatentTable {
    dim: usize,
    entries: BTreeMap<i64, Vec<f64>>,
}

impl SceneLatentTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, frame: i64, values: Vec<f64>) -> Result<(), SceneError> {
        if values.len() != self.dim {
            return Err(SceneError::DimMismatch {
                expected: self.dim,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SceneError::Invalid(format!("frame {frame} has a non-finite latent")));
        }
        if self.entries.insert(frame, values).is_some() {
            return Err(SceneError::DuplicateFrame(frame));
        }
        Ok(())
    }

    pub fn get(&self, frame: i64) -> Result<&[f64], SceneError> {
        self.entries
            .get(&frame)
            .map(Vec::as_slice)
            .ok_or(SceneError::MissingFrame(frame))
    }

    pub fn frames(&self) -> impl Iterator<Item = i64> + '_ {
        self.entries.keys().copied()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("dim {}\n", self.dim);
        for (frame, v) in &self.entries {
            let _ = write!(s, "{frame}");
            for x in v {
                let _ = write!(s, " {x}");
            }
            s.push('\n');
        }
        s
    }
}

/// Parses the latent table text format: a `dim <D>` header followed by
/// `<frame_id> <v1> ... <vD>` rows; `#` lines and blank lines are skipped.
pub fn parse_scene_latents(text: &str, expected_dim: Option<usize>) -> Result<SceneLatentTable, SceneError> {
    let mut table: Option<SceneLatentTable> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let Some(t) = table.as_mut() else {
            let dim = match fields.as_slice() {
                ["dim", d] => d.parse::<usize>().ok().filter(|&d| d > 0),
                _ => None,
            }
            .ok_or_else(|| SceneError::Parse {
                line: line_no,
                msg: format!("expected `dim <D>` header, found `{line}`"),
            })?;
            if let Some(e) = expected_dim {
                if e != dim {
                    return Err(SceneError::DimMismatch { expected: e, got: dim });
                }
            }
            table = Some(SceneLatentTable::new(dim));
            continue;
        };
        if fields.len() != t.dim + 1 {
            return Err(SceneError::Parse {
                line: line_no,
                msg: format!("expected frame id and {} values, found {} fields", t.dim, fields.len()),
            });
        }
        let frame: i64 = fields[0].parse().map_err(|_| SceneError::Parse {
            line: line_no,
            msg: format!("bad frame id `{}`", fields[0]),
        })?;
        let values = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| SceneError::Parse {
                    line: line_no,
                    msg: format!("bad value `{f}`"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        t.insert(frame, values).map_err(|e| match e {
            SceneError::DuplicateFrame(_) => e,
            other => SceneError::Parse {
                line: line_no,
                msg: other.to_string(),
            },
        })?;
    }
    table.ok_or(SceneError::Parse {
        line: 1,
        msg: "missing `dim <D>` header".into(),
    })
}

pub fn load_scene_latents(path: &Path, expected_dim: Option<usize>) -> Result<SceneLatentTable, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scene_latents(&text, expected_dim)
}

/// Zero latent for every listed frame.
pub fn constant_scene_latents(frames: &[i64], dim: usize) -> Result<SceneLatentTable, SceneError> {
    if dim == 0 {
        return Err(SceneError::Invalid("latent dim must be >= 1".into()));
    }
    let mut t = SceneLatentTable::new(dim);
    for &f in frames {
        // repeated frame ids in the input list are harmless here
        t.entries.insert(f, vec![0.0; dim]);
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bounds {
    /// Smallest box covering `points`.
    pub fn covering(points: impl IntoIterator<Item = [f64; 2]>) -> Option<Self> {
        points.into_iter().fold(None, |acc, [x, y]| {
            Some(match acc {
                None => Bounds {
                    min_x: x,
                    min_y: y,
                    max_x: x,
                    max_y: y,
                },
                Some(b) => Bounds {
                    min_x: b.min_x.min(x),
                    min_y: b.min_y.min(y),
                    max_x: b.max_x.max(x),
                    max_y: b.max_y.max(y),
                },
            })
        })
    }

    /// Grows each side by `margin`.
    pub fn padded(self, margin: f64) -> Self {
        Bounds {
            min_x: self.min_x - margin,
            min_y: self.min_y - margin,
            max_x: self.max_x + margin,
            max_y: self.max_y + margin,
        }
    }
}

/// Occupancy histogram over a `g × g` grid, row-major (row = y cell),
/// scaled so the fullest cell is 1. Out-of-bounds points land in border cells.
pub fn grid_occupancy_encoder(points: &[[f64; 2]], g: usize, bounds: Bounds) -> Result<Vec<f64>, SceneError> {
    if g == 0 {
        return Err(SceneError::Invalid("grid size must be >= 1".into()));
    }
    let (w, h) = (bounds.max_x - bounds.min_x, bounds.max_y - bounds.min_y);
    if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
        return Err(SceneError::DegenerateBounds(bounds));
    }
    let cell = |v: f64, lo: f64, span: f64| -> usize {
        let c = ((v - lo) / span * g as f64).floor();
        if c.is_nan() || c < 0.0 {
            0
        } else {
            (c as usize).min(g - 1)
        }
    };
    let mut counts = vec![0.0; g * g];
    for &[x, y] in points {
        counts[cell(y, bounds.min_y, h) * g + cell(x, bounds.min_x, w)] += 1.0;
    }
    let max = counts.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        counts.iter_mut().for_each(|c| *c /= max);
    }
    Ok(counts)
}
