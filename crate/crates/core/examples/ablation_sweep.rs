//! Small ablation and lambda_tr sweep on the linear point task. The full
//! desk-scale study is `dmemm sweep` with `configs/linear_point.toml`.

use dmemm::cli::{run_experiment, sweep, Ablation, RunConfig, SweepParam};

fn main() -> dmemm::Result<()> {
    let mut cfg = RunConfig::from_toml_str(include_str!("configs/linear_point.toml"))?;
    cfg.train.steps = 800;
    cfg.train.hidden = vec![64, 64];
    cfg.eval.seeds = vec![0];

    for ablation in Ablation::ALL {
        let stats = run_experiment(&cfg.with_ablation(ablation))?;
        println!("{:<14} mean return {:>8.3}", ablation.name(), stats.mean_return);
    }
    let rows = sweep(&cfg, SweepParam::LambdaTr, &[0.0, 0.1, 1.0], &cfg.eval.seeds, |_| {})?;
    for r in rows {
        println!("{}={:<4} seed {} mean return {:.3}", r.param, r.value, r.seed, r.mean_return);
    }
    Ok(())
}
