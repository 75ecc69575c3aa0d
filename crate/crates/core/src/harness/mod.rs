//! Configuration, benchmark matrix execution, artifacts, and the CLI.

pub mod cli;
pub mod clipio;
pub mod config;
pub mod report;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::bridge::{run_strategy, PipelineTrace, Strategy, Task, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::{self, ClipMetrics};
use crate::worlds::{Condition, LatentClip, MixtureVideoWorld};

pub use cli::cli_main;
pub use config::RunConfig;
pub use report::{Aggregate, CellRecord, RunReport, Summary};

pub const THREADS_ENV: &str = "LATENT_BRIDGE_THREADS";

/// Worker count from `LATENT_BRIDGE_THREADS`; `None` means automatic.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::config(THREADS_ENV, format!("expected a positive integer, got `{v}`"))),
        },
    }
}

/// Metrics of a final clip, with latent diagnostics of `mixed` when given.
pub fn clip_metrics(
    world: &MixtureVideoWorld,
    task: &Task,
    final_clip: &LatentClip,
    mixed: Option<&LatentClip>,
) -> Result<ClipMetrics> {
    let region = task.unknown_region(world.dim());
    Ok(ClipMetrics {
        frame_consistency: metrics::frame_consistency(final_clip)?,
        switch_rate: metrics::switch_rate(world, final_clip)?,
        region_switch_rate: region
            .map(|r| metrics::switch_rate_in(world, final_clip, Some(&r)))
            .transpose()?,
        control_match_error: match &task.idm_cond {
            c @ Condition::Control(_) => Some(metrics::control_match_error(final_clip, c)?),
            _ => None,
        },
        latent_corr: mixed.map(|z| metrics::latent_corr(z).map(|c| c.value)).transpose()?,
        gaussianity: mixed.map(metrics::gaussianity_stats).transpose()?,
    })
}

/// One pipeline run as described by the `bridge` section.
pub struct SingleRun {
    pub task: Task,
    pub trace: PipelineTrace,
    pub metrics: ClipMetrics,
}

pub fn run_single(config: &RunConfig, strategy: Strategy) -> Result<SingleRun> {
    config.validate()?;
    let schedule = config.schedule()?;
    let world = config.world()?;
    let bridge = crate::bridge::BridgeConfig {
        strategy,
        ..config.bridge_config()
    };
    let task = Task::build(config.bridge.task, &world, bridge.seed, &config.task_params())?;
    let trace = run_strategy(&task, &world, &schedule, &bridge)?;
    let mixed = if config.metrics.latent_stats { trace.mixed.as_ref() } else { None };
    let metrics = clip_metrics(&world, &task, &trace.final_clip, mixed)?;
    Ok(SingleRun { task, trace, metrics })
}

/// Writes every clip of the trace under `dir` as `<stage>.raw` and PGM frames.
pub fn dump_trace(dir: &Path, trace: &PipelineTrace) -> Result<()> {
    for (name, clip) in trace.stages() {
        clipio::dump_clip(dir, name, clip)?;
    }
    Ok(())
}

/// Relative directory of a matrix cell's dumps.
pub fn cell_dir(task: TaskKind, strategy: Strategy, alpha: f64, seed: u64) -> String {
    format!("cells/{}/{}/alpha_{alpha}/seed_{seed}", task.name(), strategy.name())
}

struct Cell {
    task: TaskKind,
    strategy: Strategy,
    alpha: f64,
    seed: u64,
}

fn matrix(config: &RunConfig) -> Vec<Cell> {
    let a = &config.ablation;
    let mut cells = Vec::new();
    for &task in &a.tasks {
        for &strategy in &a.strategies {
            for &alpha in a.alphas_for(task) {
                for &seed in &config.seeds {
                    cells.push(Cell {
                        task,
                        strategy,
                        alpha,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

fn run_cell(config: &RunConfig, world: &MixtureVideoWorld, cell: &Cell) -> Result<(ClipMetrics, LatentClip)> {
    let schedule = config.schedule()?;
    let bridge = crate::bridge::BridgeConfig {
        alpha: cell.alpha,
        strategy: cell.strategy,
        seed: cell.seed,
        ..config.bridge_config()
    };
    let task = Task::build(cell.task, world, cell.seed, &config.task_params())?;
    let trace = run_strategy(&task, world, &schedule, &bridge)?;
    let mixed = if config.metrics.latent_stats { trace.mixed.as_ref() } else { None };
    let m = clip_metrics(world, &task, &trace.final_clip, mixed)?;
    Ok((m, trace.final_clip))
}

/// Runs every cell of the matrix, writes artifacts under `out_dir`, and
/// returns the report. Cell failures are recorded, never propagated.
pub fn run_benchmark(config: &RunConfig, threads: Option<usize>) -> Result<RunReport> {
    config.validate()?;
    let world = config.world()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::config(THREADS_ENV, e.to_string()))?;
    let started = Instant::now();
    let cells = matrix(config);
    let mut records: Vec<CellRecord> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let t0 = Instant::now();
                let outcome = catch_unwind(AssertUnwindSafe(|| run_cell(config, &world, cell)))
                    .unwrap_or_else(|p| {
                        let msg = p
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "panic".into());
                        Err(Error::Metric(format!("cell panicked: {msg}")))
                    });
                let outcome = outcome.and_then(|(m, clip)| {
                    if config.dump_clips {
                        let dir = config.out_dir.join(cell_dir(cell.task, cell.strategy, cell.alpha, cell.seed));
                        clipio::dump_clip(&dir, "final", &clip)?;
                    }
                    Ok(m)
                });
                let (metrics, error) = match outcome {
                    Ok(m) => (Some(m), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                CellRecord {
                    task: cell.task,
                    strategy: cell.strategy,
                    alpha: cell.alpha,
                    seed: cell.seed,
                    metrics,
                    error,
                    wall_time: t0.elapsed().as_secs_f64(),
                }
            })
            .collect()
    });
    report::sort_records(&mut records);
    let report = RunReport {
        tool_version: crate::TOOL_VERSION.to_string(),
        global_seed: config.world.seed,
        config: config.clone(),
        aggregates: report::aggregate(&records),
        records,
        wall_time: started.elapsed().as_secs_f64(),
    };
    report.write(&config.out_dir)?;
    Ok(report)
}
