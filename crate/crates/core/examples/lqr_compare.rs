//! Compares the optimal controller, the scripted expert and random actions on
//! the evaluation start states of the linear point task.

use dmemm::envs::{random_action, EnvSpec, ExpertPolicy};
use dmemm::oracle::lqr_optimal;
use dmemm::planner::{episode_seed, run_episode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dmemm::Result<()> {
    let spec = EnvSpec::linear_point_default();
    let (n, seed) = (20, 1_000_000);
    let (mut lqr, mut expert, mut random) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let ep = episode_seed(seed, i);
        let s0 = dmemm::envs::env_reset(&spec, ep);
        lqr += lqr_optimal(&spec, &s0, spec.horizon())?.total_return;
        let mut policy = ExpertPolicy::new();
        expert += run_episode(&spec, i, ep, |s, _| Ok(policy.act(&spec, s)))?.total_return;
        let mut rng = ChaCha8Rng::seed_from_u64(ep);
        random += run_episode(&spec, i, ep, |_, _| Ok(random_action(&spec, &mut rng)))?.total_return;
    }
    let n = n as f64;
    println!("mean return over {n} start states");
    println!("  optimal (Riccati) {:>8.3}", lqr / n);
    println!("  scripted expert   {:>8.3}", expert / n);
    println!("  uniform random    {:>8.3}", random / n);
    Ok(())
}
