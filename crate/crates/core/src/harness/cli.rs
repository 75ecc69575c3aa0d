use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::bridge::{framewise_invert, Strategy, Task};
use crate::ddim::{self, GuidanceSpec};
use crate::error::{Error, Result};
use crate::metrics;
use crate::schedule::StepGrid;
use crate::worlds::WorldDenoiser;

use super::{clip_metrics, clipio, dump_trace, run_benchmark, run_single, threads_from_env, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "latent-bridge",
    version,
    about = "Image/video diffusion bridging on analytic mixture video worlds",
    after_help = "Exit status: 0 on success, 1 when cells or runs failed, 2 on configuration or usage errors.\n\
                  LATENT_BRIDGE_THREADS caps the worker count (unset = automatic)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one pipeline (strategy from config or --strategy) and dump every trace clip.
    Generate(Common),
    /// Frame-wise and clip-wise inversion diagnostics for a clip file.
    Invert {
        #[command(flatten)]
        common: Common,
        /// Clip to invert (.raw).
        #[arg(long)]
        clip: PathBuf,
    },
    /// Run the sequential bridge and dump its trace.
    Bridge(Common),
    /// Run the benchmark matrix and write report.json, report.csv and clip dumps.
    Ablate(Common),
    /// Recompute metrics from dumped clip files.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Clip files (.raw).
        #[arg(long = "clip", required = true, num_args = 1..)]
        clips: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed (ablate: replaces the seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Mixing ratio in [0, 1] (ablate: replaces every alpha list).
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// idm_only, vdm_only, alternate, fuse or sequential (ablate: replaces the strategy list).
    #[arg(long)]
    strategy: Option<String>,
    /// Number of inference steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, ablate: bool) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            c.bridge.seed = seed;
            if ablate {
                c.seeds = vec![seed];
            }
        }
        if let Some(alpha) = self.alpha {
            c.bridge.alpha = alpha;
            if ablate {
                c.ablation.alphas = vec![alpha];
                c.ablation.task_alphas.clear();
            }
        }
        if let Some(name) = &self.strategy {
            let s = Strategy::parse(name)?;
            c.bridge.strategy = s;
            if ablate {
                c.ablation.strategies = vec![s];
            }
        }
        if let Some(steps) = self.steps {
            c.ddim.t_infer = steps;
        }
        if let Some(dir) = &self.out_dir {
            c.out_dir = dir.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn single(common: &Common, forced: Option<Strategy>) -> Result<i32> {
    let config = common.resolve(false)?;
    let strategy = match forced {
        Some(s) if common.strategy.is_some() && config.bridge.strategy != s => {
            return Err(Error::config("bridge.strategy", format!("this command always runs `{}`", s.name())));
        }
        Some(s) => s,
        None => config.bridge.strategy,
    };
    let run = run_single(&config, strategy)?;
    dump_trace(&config.out_dir, &run.trace)?;
    let summary = json!({
        "task": config.bridge.task,
        "strategy": strategy,
        "alpha": config.bridge.alpha,
        "seed": config.bridge.seed,
        "metrics": run.metrics,
    });
    std::fs::write(config.out_dir.join("metrics.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    print_json(&summary)?;
    Ok(0)
}

fn invert(common: &Common, path: &PathBuf) -> Result<i32> {
    let config = common.resolve(false)?;
    let clip = clipio::read_raw(path)?;
    let world = config.world()?;
    if clip.frames() != world.frames() || clip.height() != world.height() || clip.width() != world.width() {
        return Err(Error::Shape(format!(
            "clip is {}x{}x{}, world expects {}x{}x{}",
            clip.frames(),
            clip.height(),
            clip.width(),
            world.frames(),
            world.height(),
            world.width()
        )));
    }
    let schedule = config.schedule()?;
    let grid = StepGrid::new(&schedule, config.ddim.t_infer)?;
    let opts = config.ddim.invert_options();
    let idm = WorldDenoiser::frame(&world, &schedule);
    let vdm = WorldDenoiser::clip(&world, &schedule);
    let img = framewise_invert(&idm, &clip, &grid, &opts)?;
    let vid = clip.with_values(ddim::ddim_invert(&vdm, clip.values(), &grid, &GuidanceSpec::none(), &opts)?)?;
    let vid_back = clip.with_values(ddim::ddim_sample(&vdm, vid.values(), &grid, &GuidanceSpec::none())?)?;
    std::fs::create_dir_all(&config.out_dir)?;
    clipio::dump_clip(&config.out_dir, "img_inverted", &img)?;
    clipio::dump_clip(&config.out_dir, "vid_inverted", &vid)?;
    let mut branches = serde_json::Map::new();
    for (name, z) in [("image", &img), ("video", &vid)] {
        branches.insert(
            name.into(),
            json!({
                "latent_corr": metrics::latent_corr(z)?,
                "gaussianity": metrics::gaussianity_stats(z)?,
            }),
        );
    }
    print_json(&json!({
        "clip": path,
        "invert_mode": config.ddim.invert_mode,
        "branches": branches,
        "video_round_trip_error": vid_back.max_abs_diff(&clip),
    }))?;
    Ok(0)
}

fn ablate(common: &Common) -> Result<i32> {
    let config = common.resolve(true)?;
    let report = run_benchmark(&config, threads_from_env()?)?;
    let failures = report.failures();
    eprintln!(
        "{} cells, {failures} failed; wrote {}",
        report.records.len(),
        config.out_dir.join("report.json").display()
    );
    Ok(if failures > 0 { 1 } else { 0 })
}

fn recompute(common: &Common, clips: &[PathBuf]) -> Result<i32> {
    let config = common.resolve(false)?;
    let world = config.world()?;
    let task = Task::build(config.bridge.task, &world, config.bridge.seed, &config.task_params())?;
    let mut out = Vec::new();
    for path in clips {
        let clip = clipio::read_raw(path)?;
        if clip.len() != world.clip_len() {
            return Err(Error::Shape(format!("{} does not match the world's clip shape", path.display())));
        }
        let m = clip_metrics(&world, &task, &clip, None)?;
        out.push(json!({ "clip": path, "metrics": m }));
    }
    print_json(&serde_json::Value::Array(out))?;
    Ok(0)
}

/// Parses `argv` (including the program name) and runs the command; returns
/// the process exit status.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Generate(c) => single(c, None),
        Command::Bridge(c) => single(c, Some(Strategy::Sequential)),
        Command::Invert { common, clip } => invert(common, clip),
        Command::Ablate(c) => ablate(c),
        Command::Metrics { common, clips } => recompute(common, clips),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}
