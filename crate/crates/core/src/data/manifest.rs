use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{build_windows, load_trajectory_table, ColumnOrder, DataError, Layout, Result, TrajectoryRecord, TrajectoryWindow, WindowConfig};
use crate::encodings::planar_position;
use crate::scene::{constant_scene_latents, grid_occupancy_encoder, load_scene_latents, Bounds, SceneLatentTable};
use crate::tensor::Tensor;

/// One `scene_name path [latents_path]` line of a scene manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub path: PathBuf,
    pub latents: Option<PathBuf>,
}

/// Relative paths are resolved against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out: Vec<ManifestEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(DataError::Parse {
                line: i + 1,
                msg: format!("expected `scene_name path [latents_path]`, found {} fields", fields.len()),
            });
        }
        if out.iter().any(|e| e.name == fields[0]) {
            return Err(DataError::Parse {
                line: i + 1,
                msg: format!("scene `{}` listed twice", fields[0]),
            });
        }
        out.push(ManifestEntry {
            name: fields[0].to_string(),
            path: base.join(fields[1]),
            latents: fields.get(2).map(|p| base.join(p)),
        });
    }
    if out.is_empty() {
        return Err(DataError::Invalid("manifest lists no scenes".into()));
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub scenes: Vec<String>,
    pub held_out: String,
    pub train: Vec<String>,
}

/// Trains on every scene except `held_out`, which becomes the test scene.
pub fn leave_one_out_split(scenes: &[String], held_out: &str) -> Result<SplitPlan> {
    if !scenes.iter().any(|s| s == held_out) {
        return Err(DataError::UnknownScene {
            name: held_out.to_string(),
            valid: scenes.join(", "),
        });
    }
    if scenes.len() < 2 {
        return Err(DataError::Invalid(format!(
            "cannot hold out `{held_out}`: it is the only scene"
        )));
    }
    Ok(SplitPlan {
        scenes: scenes.to_vec(),
        held_out: held_out.to_string(),
        train: scenes.iter().filter(|s| *s != held_out).cloned().collect(),
    })
}

/// Where per-frame scene latents come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LatentSource {
    /// All-zero latents (scene stream ablated).
    #[default]
    Zero,
    /// Occupancy histogram of all agents in the frame, `grid × grid` cells.
    Occupancy { grid: usize },
    /// Per-scene latent table named in the manifest.
    File,
}

impl FromStr for LatentSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "zero" => Ok(Self::Zero),
            "file" => Ok(Self::File),
            "occupancy" => Ok(Self::Occupancy { grid: 8 }),
            _ => match s.strip_prefix("occupancy:").map(str::parse::<usize>) {
                Some(Ok(grid)) if grid > 0 => Ok(Self::Occupancy { grid }),
                _ => Err(format!("unknown scene latent source `{s}` (zero|file|occupancy[:G])")),
            },
        }
    }
}

impl fmt::Display for LatentSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => f.write_str("zero"),
            Self::File => f.write_str("file"),
            Self::Occupancy { grid } => write!(f, "occupancy:{grid}"),
        }
    }
}

/// A loaded scene: its records and centered windows with latents attached.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub name: String,
    pub records: Vec<TrajectoryRecord>,
    pub windows: Vec<TrajectoryWindow>,
}

impl SceneData {
    /// Builds windows from `records` and resolves a latent for every
    /// observed frame of every window.
    pub fn from_records(
        name: &str,
        records: Vec<TrajectoryRecord>,
        cfg: WindowConfig,
        source: LatentSource,
        latent_dim: usize,
        table: Option<&SceneLatentTable>,
    ) -> Result<Self> {
        let mut windows = build_windows(name, &records, cfg)?;
        let table = match source {
            LatentSource::Zero => {
                let frames: Vec<i64> = records.iter().map(|r| r.frame_id).collect();
                constant_scene_latents(&frames, latent_dim)?
            }
            LatentSource::Occupancy { grid } => occupancy_latents(&records, grid)?,
            LatentSource::File => table
                .cloned()
                .ok_or_else(|| DataError::Invalid(format!("scene `{name}` has no latent file in the manifest")))?,
        };
        if table.dim() != latent_dim {
            return Err(DataError::Invalid(format!(
                "scene `{name}`: latent dim {} does not match configured {latent_dim}",
                table.dim()
            )));
        }
        for w in &mut windows {
            attach_latents(w, &table)?;
        }
        Ok(Self {
            name: name.to_string(),
            records,
            windows,
        })
    }

    pub fn load(
        entry: &ManifestEntry,
        layout: Layout,
        order: ColumnOrder,
        cfg: WindowConfig,
        source: LatentSource,
        latent_dim: usize,
    ) -> Result<Self> {
        let records = load_trajectory_table(&entry.path, layout, order)?;
        let table = match (&entry.latents, source) {
            (Some(p), LatentSource::File) => Some(load_scene_latents(p, Some(latent_dim))?),
            _ => None,
        };
        Self::from_records(&entry.name, records, cfg, source, latent_dim, table.as_ref())
    }
}

/// Fills `w.scene_latents` with the rows for its observed frames.
pub fn attach_latents(w: &mut TrajectoryWindow, table: &SceneLatentTable) -> Result<()> {
    let mut data = Vec::with_capacity(w.t_obs() * table.dim());
    for &f in &w.frame_ids[..w.t_obs()] {
        data.extend_from_slice(table.get(f)?);
    }
    w.scene_latents = Some(Tensor::new(&[w.t_obs(), table.dim()], data).map_err(|e| DataError::Invalid(e.to_string()))?);
    Ok(())
}

/// Occupancy latents for every frame over the padded bounds of the scene.
pub fn occupancy_latents(records: &[TrajectoryRecord], grid: usize) -> Result<SceneLatentTable> {
    let mut table = SceneLatentTable::new(grid * grid);
    let Some(bounds) = Bounds::covering(records.iter().map(|r| planar_position(&r.coords))) else {
        return Ok(table);
    };
    let bounds = bounds.padded(0.5);
    let mut by_frame: BTreeMap<i64, Vec<[f64; 2]>> = BTreeMap::new();
    for r in records {
        by_frame.entry(r.frame_id).or_default().push(planar_position(&r.coords));
    }
    for (f, pts) in by_frame {
        table.insert(f, grid_occupancy_encoder(&pts, grid, bounds)?)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn leave_one_out_examples() {
        let all = names(&["eth", "hotel", "univ", "zara1", "zara2"]);
        let p = leave_one_out_split(&all, "eth").unwrap();
        assert_eq!(p.train, names(&["hotel", "univ", "zara1", "zara2"]));
        let err = leave_one_out_split(&all, "etj").unwrap_err().to_string();
        assert!(err.contains("hotel") && err.contains("etj"), "{err}");
        assert!(leave_one_out_split(&names(&["eth"]), "eth").is_err());
    }

    #[test]
    fn manifest_lines() {
        let m = parse_manifest("# scenes\neth a.txt\nhotel b.txt lat.txt\n", Path::new("/d")).unwrap();
        assert_eq!(m[0].path, PathBuf::from("/d/a.txt"));
        assert_eq!(m[1].latents, Some(PathBuf::from("/d/lat.txt")));
        assert!(matches!(parse_manifest("eth\n", Path::new(".")), Err(DataError::Parse { line: 1, .. })));
        assert!(parse_manifest("a x\na y\n", Path::new(".")).is_err());
    }

    #[test]
    fn latent_source_parsing() {
        assert_eq!("occupancy:4".parse(), Ok(LatentSource::Occupancy { grid: 4 }));
        assert_eq!(LatentSource::Occupancy { grid: 4 }.to_string(), "occupancy:4");
        assert!("bogus".parse::<LatentSource>().is_err());
    }

    #[test]
    fn missing_latent_frame_is_an_error() {
        let recs: Vec<_> = (0..20)
            .map(|f| TrajectoryRecord {
                frame_id: f,
                agent_id: 0,
                coords: vec![f as f64, 0.0],
            })
            .collect();
        let mut table = SceneLatentTable::new(2);
        for f in 0..7 {
            table.insert(f, vec![0.0, 1.0]).unwrap();
        }
        let err = SceneData::from_records("s", recs.clone(), WindowConfig::default(), LatentSource::File, 2, Some(&table));
        assert!(matches!(err, Err(DataError::Scene(_))));
        table.insert(7, vec![0.5, 0.5]).unwrap();
        let ok = SceneData::from_records("s", recs.clone(), WindowConfig::default(), LatentSource::File, 2, Some(&table)).unwrap();
        assert_eq!(ok.windows[0].scene_latents.as_ref().unwrap().shape(), &[8, 2]);
        let occ = SceneData::from_records("s", recs, WindowConfig::default(), LatentSource::Occupancy { grid: 3 }, 9, None).unwrap();
        assert_eq!(occ.windows[0].scene_latents.as_ref().unwrap().row(0).iter().sum::<f64>(), 1.0);
    }
}
