//! End-to-end experiment steps shared by the commands, the examples and the
//! experiment tests.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cli::config::RunConfig;
use crate::dataset::{collect_dataset, OfflineDataset};
use crate::error::{Error, Result};
use crate::planner::{rollout_eval, EvalStats};
use crate::training::{train_diffusion, Checkpoint, LogRow};
use crate::world::{train_reward, train_transition, RewardModel, TransitionModel};

pub fn generate_dataset(cfg: &RunConfig) -> Result<OfflineDataset> {
    collect_dataset(&cfg.env, cfg.data.policy, cfg.data.episodes, cfg.data.noise_scale, cfg.seed)
}

/// Learned transition ensemble and reward model.
#[derive(Debug, Clone)]
pub struct WorldModels {
    pub transition: TransitionModel,
    pub reward: RewardModel,
}

pub fn fit_world_models(dataset: &OfflineDataset, cfg: &RunConfig) -> Result<WorldModels> {
    let wcfg = cfg.world_config();
    Ok(WorldModels {
        transition: train_transition(dataset, &wcfg)?,
        reward: train_reward(dataset, &wcfg)?,
    })
}

fn check_dims(dataset: &OfflineDataset, cfg: &RunConfig) -> Result<()> {
    let data = (dataset.spec.state_dim(), dataset.spec.action_dim());
    let conf = (cfg.env.state_dim(), cfg.env.action_dim());
    if data != conf {
        return Err(Error::config(format!(
            "dataset dims (state {}, action {}) do not match the config env (state {}, action {})",
            data.0, data.1, conf.0, conf.1
        )));
    }
    Ok(())
}

/// Trains the diffusion model and bundles it with the world models.
pub fn train_checkpoint(
    dataset: &OfflineDataset,
    models: &WorldModels,
    cfg: &RunConfig,
    on_log: impl FnMut(&LogRow),
) -> Result<(Checkpoint, Vec<LogRow>)> {
    check_dims(dataset, cfg)?;
    let tcfg = cfg.train_config();
    let outcome = train_diffusion(dataset, Some(&models.transition), Some(&models.reward), &tcfg, on_log)?;
    let ckpt = Checkpoint {
        noise_net: outcome.net,
        schedule: outcome.schedule,
        normalizer: dataset.stats.normalizer.clone(),
        transition: Some(models.transition.clone()),
        reward: Some(models.reward.clone()),
        step: tcfg.steps,
        rng_summary: format!("chacha8 seed {} after {} batches", tcfg.seed, tcfg.steps),
        train_config: tcfg,
        config_echo: cfg.echo(),
    };
    Ok((ckpt, outcome.log))
}

/// Closed-loop evaluation with the config's env, guidance and eval settings.
pub fn evaluate(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<EvalStats> {
    rollout_eval(&cfg.env, ckpt, &cfg.guidance, cfg.eval.episodes, cfg.eval.seed)
}

/// Data collection, world models, training and evaluation in one call.
pub fn run_experiment(cfg: &RunConfig) -> Result<EvalStats> {
    cfg.validate()?;
    let dataset = generate_dataset(cfg)?;
    let models = fit_world_models(&dataset, cfg)?;
    let (ckpt, _) = train_checkpoint(&dataset, &models, cfg, |_| {})?;
    evaluate(&ckpt, cfg)
}

/// Hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    LambdaTr,
    LambdaRd,
    Alpha,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim() {
            "lambda_tr" | "λ_tr" => Ok(SweepParam::LambdaTr),
            "lambda_rd" | "λ_rd" => Ok(SweepParam::LambdaRd),
            "alpha" | "α" => Ok(SweepParam::Alpha),
            other => Err(Error::config(format!(
                "unknown sweep parameter {other:?}; expected lambda_tr, lambda_rd or alpha"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::LambdaTr => "lambda_tr",
            SweepParam::LambdaRd => "lambda_rd",
            SweepParam::Alpha => "alpha",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig, value: f64) {
        match self {
            SweepParam::LambdaTr => cfg.train.lambda_tr = value,
            SweepParam::LambdaRd => cfg.train.lambda_rd = value,
            SweepParam::Alpha => cfg.guidance.alpha = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub mean_return: f64,
}

/// Full train and evaluation for every `(seed, value)` pair. The dataset and
/// world models depend only on the seed and are shared across values; a guide
/// scale sweep also shares the trained diffusion model.
pub fn sweep(
    base: &RunConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::config("a sweep needs at least one value and one seed"));
    }
    base.validate()?;
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &seed in seeds {
        let seeded = RunConfig { seed, ..base.clone() };
        let dataset = generate_dataset(&seeded)?;
        let models = fit_world_models(&dataset, &seeded)?;
        let mut shared: Option<Checkpoint> = None;
        for &value in values {
            let mut cfg = seeded.clone();
            param.apply(&mut cfg, value);
            cfg.validate()?;
            let ckpt = match (&shared, param) {
                (Some(c), SweepParam::Alpha) => c.clone(),
                _ => train_checkpoint(&dataset, &models, &cfg, |_| {})?.0,
            };
            let stats = evaluate(&ckpt, &cfg)?;
            let row = SweepRow {
                param: param.name().into(),
                value,
                seed,
                mean_return: stats.mean_return,
            };
            on_row(&row);
            rows.push(row);
            if param == SweepParam::Alpha {
                shared = Some(ckpt);
            }
        }
    }
    Ok(rows)
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Per-episode rows as written to `episodes.csv`.
pub fn write_episodes_csv(path: &Path, stats: &EvalStats) -> Result<()> {
    write_csv(path, &stats.episodes, &["episode", "seed", "return", "steps", "success"])
}

pub fn write_train_log(path: &Path, log: &[LogRow]) -> Result<()> {
    write_csv(path, log, &["step", "loss_total", "loss_wdiff", "loss_tr", "loss_rd"])
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_csv(path, rows, &["param", "value", "seed", "mean_return"])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_params_parse() {
        for p in [SweepParam::LambdaTr, SweepParam::LambdaRd, SweepParam::Alpha] {
            assert_eq!(SweepParam::parse(p.name()).unwrap(), p);
        }
        assert_eq!(SweepParam::parse("λ_tr").unwrap(), SweepParam::LambdaTr);
        assert_eq!(SweepParam::parse("beta").unwrap_err().exit_code(), 2);
    }
}
