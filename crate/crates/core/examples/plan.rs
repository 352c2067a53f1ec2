//! Draws guided plans from a trained checkpoint and runs the receding-horizon
//! controller.

use dmemm::cli::{fit_world_models, generate_dataset, train_checkpoint, RunConfig};
use dmemm::planner::{rollout_eval, GuidanceConfig, Planner};

fn main() -> dmemm::Result<()> {
    let cfg = RunConfig::from_toml_str(include_str!("configs/linear_point.toml"))?;
    let cfg = RunConfig {
        train: dmemm::training::TrainConfig { steps: 1500, ..cfg.train },
        ..cfg
    };
    let ds = generate_dataset(&cfg)?;
    let models = fit_world_models(&ds, &cfg)?;
    let (ckpt, _) = train_checkpoint(&ds, &models, &cfg, |_| {})?;

    let planner = Planner::from_checkpoint(&ckpt, &cfg.guidance)?;
    let plan = planner.plan(&[1.5, -1.0], 0)?;
    for t in 0..plan.horizon() {
        println!("t={t} state {:>7.3?} action {:>7.3?}", plan.state(t), plan.action(t));
    }

    for alpha in [0.0, cfg.guidance.alpha] {
        let g = GuidanceConfig { alpha, ..cfg.guidance.clone() };
        let stats = rollout_eval(&cfg.env, &ckpt, &g, 10, cfg.eval.seed)?;
        println!("alpha {alpha}: mean return {:.3} (std {:.3})", stats.mean_return, stats.std_return);
    }
    Ok(())
}
