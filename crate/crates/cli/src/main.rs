use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use astra_core::data::{
    attach_latents, load_trajectory_table, observation_window, occupancy_latents, records_to_text, synth_generate,
    LatentSource, SynthKind, SynthParams, TrajectoryRecord, TrajectoryWindow,
};
use astra_core::gradcheck;
use astra_core::metrics::{ArbVariant, MetricsReport, METRIC_NAMES};
use astra_core::model::{Mode, ModelError};
use astra_core::scene::{constant_scene_latents, load_scene_latents};
use astra_core::tensor::TensorError;
use astra_core::train::{evaluate, load_scenes, train, Checkpoint, Dataset, TrainConfig, TrainError};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "astra", version, about = "Train, evaluate and inspect pedestrian trajectory forecasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a `key = value` config file and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// det or stoch
        #[arg(long)]
        mode: Option<Mode>,
        /// Checkpoint path; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on every window of a data manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Samples per agent; defaults to 20 for stochastic and 1 for
        /// deterministic checkpoints.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        arb_variant: Option<ArbVariant>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Forecast the future of one observed window.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Trajectory table covering exactly the observed frames.
        #[arg(long)]
        window: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene latent table, required when the model uses file latents.
        #[arg(long)]
        latents: Option<PathBuf>,
    },
    /// Write a synthetic corpus and a one-scene manifest.
    Synth {
        /// constant_velocity, bimodal_turn or circular
        #[arg(long)]
        kind: SynthKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        agents: usize,
        #[arg(long, default_value_t = 8)]
        t_obs: usize,
        #[arg(long, default_value_t = 12)]
        t_pred: usize,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Turn an evaluation report or checkpoint into plain-text series files.
    PlotData {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

type CmdResult = Result<(), Failure>;

trait Classify<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, err: e.into() })
    }
}

fn is_numeric(e: &ModelError) -> bool {
    matches!(e, ModelError::Tensor(TensorError::NonFinite { .. }))
}

fn train_failure(e: TrainError) -> Failure {
    let code = match &e {
        TrainError::Config(_) => EXIT_USAGE,
        TrainError::Diverged { .. } => EXIT_NUMERIC,
        TrainError::Model(m) if is_numeric(m) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    };
    Failure { code, err: e.into() }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn run_train(config: &Path, seed: Option<u64>, mode: Option<Mode>, out: Option<PathBuf>) -> CmdResult {
    let text = fs::read_to_string(config)
        .with_context(|| format!("reading {}", config.display()))
        .code(EXIT_USAGE)?;
    let mut cfg = TrainConfig::parse_text(&text)
        .with_context(|| format!("in {}", config.display()))
        .code(EXIT_USAGE)?;
    let base = config.parent().unwrap_or(Path::new("."));
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.model.mode = m;
    }
    cfg.out = match out {
        Some(o) => Some(o),
        None => cfg.out.as_deref().map(|o| resolve(base, o)),
    };
    if cfg.out.is_none() {
        return Err(anyhow!("no checkpoint destination: set `out` in the config or pass --out")).code(EXIT_USAGE);
    }
    let data = cfg
        .data
        .as_deref()
        .map(|d| resolve(base, d))
        .ok_or_else(|| anyhow!("config has no `data` manifest"))
        .code(EXIT_USAGE)?;
    cfg.data = Some(data.clone());
    cfg.validate().code(EXIT_USAGE)?;

    let dataset = Dataset::load(&cfg, &data).map_err(train_failure)?;
    eprintln!(
        "training {} model on {} windows ({} validation, {} test)",
        cfg.model.mode,
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len()
    );
    let outcome = match train(&cfg, &dataset, |log| eprintln!("{log}")) {
        Ok(o) => o,
        Err(TrainError::Diverged {
            epoch,
            step,
            detail,
            last_good,
        }) => {
            let out = cfg.out.as_ref().expect("checked above");
            let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".last_good");
            let rescue = out.with_file_name(name);
            if let Err(e) = last_good.save(&rescue) {
                eprintln!("could not save last good parameters: {e}");
            } else {
                eprintln!("last good parameters saved to {}", rescue.display());
            }
            return Err(anyhow!("training diverged at epoch {epoch}, step {step}: {detail}")).code(EXIT_NUMERIC);
        }
        Err(e) => return Err(train_failure(e)),
    };
    let out = cfg.out.as_ref().expect("checked above");
    println!("checkpoint = {}", out.display());
    if let Some(e) = outcome.best_epoch {
        println!("best_epoch = {e}");
    }
    if let Some(r) = &outcome.checkpoint.metrics {
        println!("[validation]");
        print!("{}", r.to_text());
    }
    if !dataset.test.is_empty() {
        let r = evaluate(
            &outcome.checkpoint.model,
            &dataset.test,
            cfg.effective_k(),
            cfg.seed,
            cfg.arb_variant,
        )
        .map_err(train_failure)?;
        println!("[test]");
        print!("{}", r.to_text());
    }
    Ok(())
}

fn run_evaluate(
    checkpoint: &Path,
    data: &Path,
    k: Option<usize>,
    arb: Option<ArbVariant>,
    seed: Option<u64>,
    report: Option<PathBuf>,
) -> CmdResult {
    let ck = Checkpoint::load(checkpoint).code(EXIT_DATA)?;
    let k = k.unwrap_or(match ck.model.mode() {
        Mode::Deterministic => 1,
        Mode::Stochastic => 20,
    });
    let scenes = load_scenes(&ck.config, data).map_err(train_failure)?;
    let windows: Vec<TrajectoryWindow> = scenes.into_iter().flat_map(|s| s.windows).collect();
    if windows.is_empty() {
        return Err(anyhow!("{} yields no complete windows", data.display())).code(EXIT_DATA);
    }
    let r = evaluate(
        &ck.model,
        &windows,
        k,
        seed.unwrap_or(ck.config.seed),
        arb.unwrap_or(ck.config.arb_variant),
    )
    .map_err(train_failure)?;
    let text = r.to_text();
    print!("{text}");
    if let Some(p) = report {
        fs::write(&p, &text)
            .with_context(|| format!("writing {}", p.display()))
            .code(EXIT_DATA)?;
    }
    Ok(())
}

fn run_predict(
    checkpoint: &Path,
    window: &Path,
    out: &Path,
    k: Option<usize>,
    seed: u64,
    latents: Option<PathBuf>,
) -> CmdResult {
    let ck = Checkpoint::load(checkpoint).code(EXIT_DATA)?;
    let cfg = &ck.config;
    let records = load_trajectory_table(window, cfg.layout, cfg.column_order).code(EXIT_DATA)?;
    let mut w = observation_window("window", &records, cfg.model.t_obs).code(EXIT_DATA)?;
    let dim = cfg.model.d_latent;
    let table = match (cfg.latent_source, latents) {
        (_, Some(p)) => load_scene_latents(&p, Some(dim)).code(EXIT_DATA)?,
        (LatentSource::File, None) => {
            return Err(anyhow!("the model reads scene latents from files; pass --latents")).code(EXIT_USAGE)
        }
        (LatentSource::Zero, None) => constant_scene_latents(&w.frame_ids, dim).code(EXIT_DATA)?,
        (LatentSource::Occupancy { grid }, None) => occupancy_latents(&records, grid).code(EXIT_DATA)?,
    };
    attach_latents(&mut w, &table).code(EXIT_DATA)?;

    let k = k.unwrap_or(match ck.model.mode() {
        Mode::Deterministic => 1,
        Mode::Stochastic => cfg.k_eval,
    });
    let set = ck.model.predict(&w, k, seed).map_err(|e| {
        let code = if is_numeric(&e) { EXIT_NUMERIC } else { EXIT_DATA };
        Failure { code, err: e.into() }
    })?;

    let step = w.frame_ids.windows(2).map(|p| p[1] - p[0]).min().unwrap_or(1);
    let last = *w.frame_ids.last().expect("non-empty window");
    let offset = &w.centering_offset;
    let mut text = String::from("# sample frame agent coords...\n");
    for s in 0..set.k() {
        for (a, &agent) in w.agent_ids.iter().enumerate() {
            let traj = set.trajectory(s, a);
            for (t, coords) in traj.chunks(set.coord_dim()).enumerate() {
                let frame = last + step * (t as i64 + 1);
                let _ = write!(text, "{s} {frame} {agent}");
                for (c, v) in coords.iter().enumerate() {
                    let _ = write!(text, " {}", v + offset[c]);
                }
                text.push('\n');
            }
        }
    }
    fs::write(out, text)
        .with_context(|| format!("writing {}", out.display()))
        .code(EXIT_DATA)?;
    eprintln!("{} forecasts for {} agents written to {}", set.k(), w.n_agents(), out.display());
    Ok(())
}

fn run_synth(kind: SynthKind, n: usize, seed: u64, out: &Path, agents: usize, t_obs: usize, t_pred: usize) -> CmdResult {
    if n == 0 || agents == 0 || t_obs < 2 || t_pred == 0 {
        return Err(anyhow!("need --n >= 1, --agents >= 1, --t-obs >= 2 and --t-pred >= 1")).code(EXIT_USAGE);
    }
    let params = SynthParams {
        t_obs,
        t_pred,
        agents,
        ..SynthParams::default()
    };
    let records: Vec<TrajectoryRecord> = synth_generate(kind, n, &params, seed);
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .code(EXIT_DATA)?;
    let table = format!("{kind}.txt");
    let write = |name: &str, body: String| {
        let p = out.join(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
    };
    write(&table, records_to_text(&records)).code(EXIT_DATA)?;
    write("manifest.txt", format!("{kind} {table}\n")).code(EXIT_DATA)?;
    println!("{}", out.join("manifest.txt").display());
    Ok(())
}

fn run_gradcheck(module: &str) -> CmdResult {
    let outcomes = gradcheck::run(module).map_err(|e| match e {
        gradcheck::GradCheckError::UnknownModule(_) => Failure {
            code: EXIT_USAGE,
            err: e.into(),
        },
        gradcheck::GradCheckError::Failed { .. } => Failure {
            code: EXIT_NUMERIC,
            err: e.into(),
        },
    })?;
    let mut failed = 0;
    for o in &outcomes {
        println!("{o}");
        failed += usize::from(!o.passed());
    }
    println!(
        "{} checks, {failed} failed (tolerance {:e}, step {:e})",
        outcomes.len(),
        gradcheck::TOLERANCE,
        gradcheck::STEP
    );
    if failed > 0 {
        return Err(anyhow!("{failed} gradient checks exceeded the tolerance")).code(EXIT_NUMERIC);
    }
    Ok(())
}

/// `epoch lr loss traj kl val val_final` rows parsed from the training log.
fn training_series(log: &[String]) -> String {
    let mut s = String::from("# epoch lr loss traj kl val val_final\n");
    for line in log {
        let field = |key: &str| {
            line.split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .unwrap_or("nan")
        };
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {}",
            field("epoch"),
            field("lr"),
            field("loss"),
            field("traj"),
            field("kl"),
            field("val"),
            field("val_final")
        );
    }
    s
}

fn metric_series(r: &MetricsReport) -> Vec<(String, String)> {
    let mut files = vec![("metrics.dat".to_string(), format!("# name value count\n{}", r.to_table()))];
    for name in METRIC_NAMES {
        let rows: Vec<String> = r
            .per_scene
            .iter()
            .filter_map(|(scene, m)| m.get(name).map(|v| format!("{scene} {v}")))
            .collect();
        if !rows.is_empty() {
            files.push((format!("scene_{name}.dat"), format!("# scene {name}\n{}\n", rows.join("\n"))));
        }
    }
    files
}

fn run_plot_data(report: &Path, out: &Path) -> CmdResult {
    let text = fs::read_to_string(report)
        .with_context(|| format!("reading {}", report.display()))
        .code(EXIT_DATA)?;
    let mut files = Vec::new();
    if text.starts_with("astra-checkpoint") {
        let ck = Checkpoint::load(report).code(EXIT_DATA)?;
        files.push(("training.dat".to_string(), training_series(&ck.log)));
        if let Some(r) = &ck.metrics {
            files.extend(metric_series(r));
        }
    } else {
        let r = MetricsReport::parse_text(&text).code(EXIT_DATA)?;
        files.extend(metric_series(&r));
    }
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .code(EXIT_DATA)?;
    for (name, body) in files {
        let p = out.join(&name);
        fs::write(&p, body)
            .with_context(|| format!("writing {}", p.display()))
            .code(EXIT_DATA)?;
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            mode,
            out,
        } => run_train(&config, seed, mode, out),
        Command::Evaluate {
            checkpoint,
            data,
            k,
            arb_variant,
            seed,
            report,
        } => run_evaluate(&checkpoint, &data, k, arb_variant, seed, report),
        Command::Predict {
            checkpoint,
            window,
            out,
            k,
            seed,
            latents,
        } => run_predict(&checkpoint, &window, &out, k, seed, latents),
        Command::Synth {
            kind,
            n,
            seed,
            out,
            agents,
            t_obs,
            t_pred,
        } => run_synth(kind, n, seed, &out, agents, t_obs, t_pred),
        Command::Gradcheck { module } => run_gradcheck(&module),
        Command::PlotData { report, out } => run_plot_data(&report, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
