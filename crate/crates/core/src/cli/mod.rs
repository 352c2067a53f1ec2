//! Command-line front end: configuration, persistence formats and the
//! `gen-data`, `train`, `plan-eval` and `sweep` commands.

pub mod checkpoint;
pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::dataset::{read_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::training::Checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_FORMAT};
pub use config::{Ablation, DataConfig, EvalConfig, RunConfig};
pub use pipeline::{
    evaluate, fit_world_models, generate_dataset, run_experiment, sweep, train_checkpoint, SweepParam,
    SweepRow, WorldModels,
};

#[derive(Debug, Parser)]
#[command(name = "dmemm", version, about = "Trajectory diffusion planning with modulated training and dual guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect an offline dataset with the configured behavior policy.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the world models and the diffusion planner on a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest or the directory holding it.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// full, w/o-weighting, w/o-tr, w/o-rd, w/o-tr-guide or baseline.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Closed-loop evaluation of a checkpoint.
    PlanEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the guide scale stored with the checkpoint.
        #[arg(long)]
        guide_alpha: Option<f64>,
    },
    /// Train and evaluate once per value and seed.
    Sweep {
        /// lambda_tr, lambda_rd or alpha.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory, or a path ending in `.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated training seeds; defaults to `eval.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_threads() {
    let Ok(value) = std::env::var("DMEMM_THREADS") else {
        return;
    };
    match value.trim().parse::<usize>() {
        // An already initialized pool keeps its size.
        Ok(n) => {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Err(_) => eprintln!("warning: ignoring DMEMM_THREADS={value:?}"),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => gen_data(&load_config(config.as_deref())?, &out),
        Command::Train {
            config,
            dataset,
            out,
            ablation,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(name) = ablation {
                Ablation::parse(&name)?.apply(&mut cfg);
            }
            train(&cfg, &dataset, &out)
        }
        Command::PlanEval {
            checkpoint,
            episodes,
            seed,
            out,
            guide_alpha,
        } => plan_eval(&checkpoint, episodes, seed, guide_alpha, &out),
        Command::Sweep {
            param,
            values,
            config,
            out,
            seeds,
        } => {
            let param = SweepParam::parse(&param)?;
            let cfg = load_config(config.as_deref())?;
            let seeds = seeds.unwrap_or_else(|| cfg.eval.seeds.clone());
            run_sweep(&cfg, param, &values, &seeds, &out)
        }
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dataset = generate_dataset(cfg)?;
    write_dataset(&dataset, out, Some(cfg.echo()))?;
    println!("episodes: {}", dataset.episodes.len());
    println!("T_max: {}", dataset.stats.t_max);
    println!("r_max: {}", dataset.stats.r_max);
    Ok(())
}

fn train(cfg: &RunConfig, dataset_path: &Path, out: &Path) -> Result<()> {
    let dataset = read_dataset(dataset_path)?;
    let models = fit_world_models(&dataset, cfg)?;
    let (ckpt, log) = train_checkpoint(&dataset, &models, cfg, |row| {
        println!(
            "step {:>6}  total {:.6}  wdiff {:.6}  tr {:.6}  rd {:.6}",
            row.step, row.loss_total, row.loss_wdiff, row.loss_tr, row.loss_rd
        );
    })?;
    write_checkpoint(&ckpt, out)?;
    pipeline::write_train_log(&out.join("train_log.csv"), &log)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

/// The run configuration stored with a checkpoint.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_value(ckpt.config_echo.clone())
        .map_err(|e| Error::config(format!("checkpoint config echo is not a run config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn plan_eval(
    checkpoint: &Path,
    episodes: Option<usize>,
    seed: Option<u64>,
    guide_alpha: Option<f64>,
    out: &Path,
) -> Result<()> {
    let ckpt = read_checkpoint(checkpoint)?;
    let mut cfg = checkpoint_config(&ckpt)?;
    if let Some(n) = episodes {
        cfg.eval.episodes = n;
    }
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    if let Some(a) = guide_alpha {
        cfg.guidance.alpha = a;
    }
    cfg.validate()?;
    let stats = evaluate(&ckpt, &cfg)?;
    pipeline::write_episodes_csv(&out.join("episodes.csv"), &stats)?;
    let summary = json!({
        "mean_return": stats.mean_return,
        "std_return": stats.std_return,
        "success_rate": stats.success_rate,
        "episodes": stats.episodes.len(),
        "seed": cfg.eval.seed,
        "config": cfg.echo(),
    });
    pipeline::write_json(&out.join("summary.json"), &summary)?;
    println!(
        "mean return {:.4} (std {:.4}), success rate {:.3} over {} episodes",
        stats.mean_return,
        stats.std_return,
        stats.success_rate,
        stats.episodes.len()
    );
    Ok(())
}

fn run_sweep(cfg: &RunConfig, param: SweepParam, values: &[f64], seeds: &[u64], out: &Path) -> Result<()> {
    let (csv_path, echo_path) = if out.extension().is_some_and(|e| e == "csv") {
        (out.to_path_buf(), out.with_extension("json"))
    } else {
        (out.join("sweep.csv"), out.join("sweep.json"))
    };
    let rows = sweep(cfg, param, values, seeds, |r| {
        println!("{} = {}  seed {}  mean return {:.4}", r.param, r.value, r.seed, r.mean_return);
    })?;
    pipeline::write_sweep_csv(&csv_path, &rows)?;
    let echo = json!({
        "param": param.name(),
        "values": values,
        "seeds": seeds,
        "config": cfg.echo(),
    });
    pipeline::write_json(&echo_path, &echo)
}
