//! Checkpoint files: a text manifest plus a little-endian `f32` blob.
//!
//! The manifest holds the configuration, one `name shape offset bytes` line
//! per parameter, the recorded evaluation metrics and the training log tail.
//! The blob sits next to the manifest as `<manifest>.bin`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "astra-checkpoint";
const DTYPE: &str = "f32le";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub metrics: Option<MetricsReport>,
    pub log: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    let mut name = manifest.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".bin");
    manifest.with_file_name(name)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

impl Checkpoint {
    /// Writes blob then manifest, each through a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut blob = Vec::new();
        let mut index = String::new();
        for (name, t) in self.model.store.iter() {
            let offset = blob.len();
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(index, "{name} {} {offset} {}", shape.join("x"), blob.len() - offset);
        }
        let bin = blob_path(path);
        let mut m = String::new();
        let _ = writeln!(m, "{MAGIC}");
        let _ = writeln!(m, "version = {CHECKPOINT_VERSION}");
        let _ = writeln!(m, "dtype = {DTYPE}");
        let _ = writeln!(m, "blob = {}", bin.file_name().unwrap().to_string_lossy());
        let _ = writeln!(m, "blob_bytes = {}", blob.len());
        let _ = writeln!(m, "[config]");
        m.push_str(&self.config.to_text());
        let _ = writeln!(m, "[params]");
        m.push_str(&index);
        if let Some(r) = &self.metrics {
            let _ = writeln!(m, "[metrics]");
            m.push_str(&r.to_text());
        }
        let _ = writeln!(m, "[log]");
        for l in &self.log {
            let _ = writeln!(m, "{l}");
        }
        write_atomic(&bin, &blob)?;
        write_atomic(path, m.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let fmt_err = |msg: String| CheckpointError::Format {
            path: path.display().to_string(),
            msg,
        };
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(fmt_err("not a checkpoint manifest".into()));
        }
        let mut header = Vec::new();
        let mut section = String::new();
        let mut sections: Vec<(String, Vec<&str>)> = Vec::new();
        for line in lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.to_string();
                sections.push((section.clone(), Vec::new()));
            } else if section.is_empty() {
                header.push(line);
            } else {
                sections.last_mut().unwrap().1.push(line);
            }
        }
        let get = |key: &str| {
            header
                .iter()
                .find_map(|l| l.split_once('=').filter(|(k, _)| k.trim() == key).map(|(_, v)| v.trim().to_string()))
                .ok_or_else(|| fmt_err(format!("missing `{key}` field")))
        };
        let version: u32 = get("version")?.parse().map_err(|_| fmt_err("bad version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt_err(format!("unsupported checkpoint version {version}")));
        }
        if get("dtype")? != DTYPE {
            return Err(fmt_err(format!("unsupported dtype `{}`", get("dtype")?)));
        }
        let bin = path.with_file_name(get("blob")?);
        let blob = fs::read(&bin).map_err(io_err(&bin))?;
        let expected: usize = get("blob_bytes")?.parse().map_err(|_| fmt_err("bad blob_bytes".into()))?;
        if blob.len() != expected {
            return Err(fmt_err(format!("blob has {} bytes, manifest says {expected}", blob.len())));
        }
        let section = |name: &str| sections.iter().find(|(n, _)| n == name).map(|(_, l)| l.join("\n"));
        let config = TrainConfig::parse_text(&section("config").ok_or_else(|| fmt_err("missing [config]".into()))?)
            .map_err(|e| fmt_err(format!("config: {e}")))?;
        let mut model = Model::new(config.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| fmt_err(format!("config: {e}")))?;
        let params = section("params").ok_or_else(|| fmt_err("missing [params]".into()))?;
        let mut seen = 0;
        for line in params.lines() {
            let f: Vec<&str> = line.split_whitespace().collect();
            let [name, shape, offset, bytes] = f[..] else {
                return Err(fmt_err(format!("bad parameter line `{line}`")));
            };
            let id = model.store.id(name).ok_or_else(|| fmt_err(format!("unknown parameter `{name}`")))?;
            let shape: Vec<usize> = shape
                .split('x')
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| fmt_err(format!("bad shape for `{name}`")))?;
            if shape != model.store.get(id).shape() {
                return Err(fmt_err(format!(
                    "`{name}` has shape {shape:?}, model expects {:?}",
                    model.store.get(id).shape()
                )));
            }
            let (offset, bytes): (usize, usize) = offset
                .parse()
                .ok()
                .zip(bytes.parse().ok())
                .ok_or_else(|| fmt_err(format!("bad offsets for `{name}`")))?;
            let n: usize = shape.iter().product();
            if bytes != 4 * n || offset + bytes > blob.len() {
                return Err(fmt_err(format!("`{name}` byte range out of bounds")));
            }
            let data = blob[offset..offset + bytes]
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            *model.store.get_mut(id) = Tensor::new(&shape, data).map_err(|e| fmt_err(e.to_string()))?;
            seen += 1;
        }
        if seen != model.store.len() {
            return Err(fmt_err(format!("checkpoint has {seen} parameters, model needs {}", model.store.len())));
        }
        let metrics = section("metrics")
            .map(|t| MetricsReport::parse_text(&t))
            .transpose()
            .map_err(|e| fmt_err(format!("metrics: {e}")))?;
        let log = section("log").map(|t| t.lines().map(str::to_string).collect()).unwrap_or_default();
        Ok(Self {
            config,
            model,
            metrics,
            log,
        })
    }
}
