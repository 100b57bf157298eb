use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use semsplat::config::load_config;
use semsplat::dataset::{
    generate_synthetic, load_bundle, load_renders, read_trajectory, save_bundle, save_renders, write_trajectory,
    SequenceBundle, SynthConfig,
};
use semsplat::metrics::{evaluate, MetricsReport};
use semsplat::pipeline::{run_sequence, FrameReport, PipelineConfig, RunOutput};
use semsplat::Pose;

use crate::table;

pub const THREADS_ENV: &str = "SEMSPLAT_THREADS";

/// Bad command-line input that the argument parser cannot catch.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Applies `SEMSPLAT_THREADS` to the worker pool; `1` also selects the
/// sequential code paths.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = match raw.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => return Err(UsageError(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")).into()),
    };
    if n == 1 {
        semsplat::par::set_parallel(false);
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn read_config<T: Default + serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(load_config(p)?),
        None => Ok(T::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serializing")?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn generate(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: SynthConfig = read_config(config)?;
    let synth = generate_synthetic(&cfg)?;
    save_bundle(&synth.bundle, out)?;
    println!(
        "wrote {} frames ({}x{}, {} splats) to {}",
        synth.bundle.len(),
        cfg.width,
        cfg.height,
        synth.gt_map.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunReport<'a> {
    config: &'a PipelineConfig,
    frame_count: usize,
    gaussian_count: usize,
    frames: &'a [FrameReport],
}

fn stamped(bundle: &SequenceBundle, trajectory: &[Pose]) -> Vec<(f64, Pose)> {
    bundle.frames.iter().map(|f| f.timestamp).zip(trajectory.iter().copied()).collect()
}

fn write_run(out: &Path, bundle: &SequenceBundle, cfg: &PipelineConfig, run: &RunOutput, renders: bool) -> Result<()> {
    create_dir(out)?;
    write_trajectory(&out.join("trajectory.txt"), &stamped(bundle, &run.trajectory))?;
    let report = RunReport {
        config: cfg,
        frame_count: run.trajectory.len(),
        gaussian_count: run.map.len(),
        frames: &run.reports,
    };
    write_json(&out.join("report.json"), &report)?;
    if renders {
        save_renders(&out.join("renders"), &run.renders)?;
    }
    Ok(())
}

pub fn run(bundle_dir: &Path, config: Option<&Path>, out: &Path, renders: bool) -> Result<()> {
    let cfg: PipelineConfig = read_config(config)?;
    let bundle = load_bundle(bundle_dir)?;
    let run = run_sequence(&bundle, &cfg)?;
    write_run(out, &bundle, &cfg, &run, renders)?;
    for r in run.reports.iter().filter_map(|r| r.warning.as_deref()) {
        eprintln!("warning: {r}");
    }
    println!(
        "tracked {} frames, {} splats; results in {}",
        run.trajectory.len(),
        run.map.len(),
        out.display()
    );
    Ok(())
}

pub fn eval(bundle_dir: &Path, result: &Path) -> Result<()> {
    let bundle = load_bundle(bundle_dir)?;
    let tpath = result.join("trajectory.txt");
    let trajectory: Vec<Pose> = read_trajectory(&tpath)?.into_iter().map(|(_, p)| p).collect();
    if trajectory.len() != bundle.len() {
        return Err(semsplat::Error::InvalidArgument(format!(
            "trajectory has {} poses, bundle has {} frames",
            trajectory.len(),
            bundle.len()
        ))
        .into());
    }
    let renders = load_renders(&result.join("renders"), bundle.len(), &bundle.intrinsics)?;
    let metrics = evaluate(&bundle, &trajectory, &renders)?;
    write_json(&result.join("metrics.json"), &metrics)?;
    print!("{}", table::render(&[("run", &metrics)]));
    Ok(())
}

#[derive(Serialize)]
struct AblationRow<'a> {
    name: &'a str,
    gaussian_count: usize,
    metrics: &'a MetricsReport,
}

pub fn ablate(bundle_dir: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let base: PipelineConfig = read_config(config)?;
    let bundle = load_bundle(bundle_dir)?;
    create_dir(out)?;
    let mut results = Vec::new();
    for (name, cfg) in base.ablation() {
        let run = run_sequence(&bundle, &cfg)?;
        write_run(&out.join(name), &bundle, &cfg, &run, false)?;
        results.push((name, run));
    }
    let rows: Vec<AblationRow> = results
        .iter()
        .map(|(name, run)| AblationRow {
            name,
            gaussian_count: run.map.len(),
            metrics: &run.metrics,
        })
        .collect();
    write_json(&out.join("ablation.json"), &rows)?;
    let text = table::render(&results.iter().map(|(n, r)| (*n, &r.metrics)).collect::<Vec<_>>());
    fs::write(out.join("ablation.txt"), &text).with_context(|| format!("writing {}", out.display()))?;
    print!("{text}");
    Ok(())
}
