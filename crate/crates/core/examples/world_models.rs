//! Fits the transition ensemble and reward model and reports their errors on
//! held-out episodes.

use dmemm::dataset::{collect_dataset, BehaviorPolicy};
use dmemm::envs::EnvSpec;
use dmemm::world::{train_reward, train_transition, WorldModelConfig};

fn main() -> dmemm::Result<()> {
    let spec = EnvSpec::linear_point_default();
    let train = collect_dataset(&spec, BehaviorPolicy::Mixed, 100, 0.3, 0)?;
    let held_out = collect_dataset(&spec, BehaviorPolicy::Mixed, 20, 0.3, 1)?;
    let cfg = WorldModelConfig::default();
    let transition = train_transition(&train, &cfg)?;
    let reward = train_reward(&train, &cfg)?;

    let norm = &train.stats.normalizer;
    let (mut state_err, mut reward_err, mut var, mut n) = (0.0, 0.0, 0.0, 0.0);
    for ep in &held_out.episodes {
        for t in 0..ep.len() {
            let s = norm.normalize_state(&ep.states[t]);
            let a = norm.normalize_action(&ep.actions[t]);
            let next = norm.normalize_state(&ep.states[t + 1]);
            let (mean, v) = transition.predict(&s, &a)?;
            state_err += mean.iter().zip(&next).map(|(m, x)| (m - x).powi(2)).sum::<f64>();
            var += v.iter().sum::<f64>() / v.len() as f64;
            reward_err += (reward.predict(&s, &a)? - ep.rewards[t]).powi(2);
            n += 1.0;
        }
    }
    println!("ensemble of {} members", transition.ensemble_size());
    println!("held-out next-state mse (normalized) {:.5}", state_err / n);
    println!("mean predicted variance {:.5}", var / n);
    println!("held-out reward mse {:.5}", reward_err / n);
    Ok(())
}
