//! Collects a mixed expert/random dataset on the linear point task, writes it
//! to disk and reads it back.

use dmemm::dataset::{collect_dataset, read_dataset, write_dataset, BehaviorPolicy};
use dmemm::envs::EnvSpec;

fn main() -> dmemm::Result<()> {
    let spec = EnvSpec::linear_point_default();
    let ds = collect_dataset(&spec, BehaviorPolicy::Mixed, 50, 0.3, 0)?;
    let returns: Vec<f64> = ds.episodes.iter().map(|e| e.total_reward()).collect();
    let best = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let worst = returns.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("episodes {} transitions {} T_max {}", ds.episodes.len(), ds.n_transitions(), ds.stats.t_max);
    println!("per-step reward range [{:.3}, {:.3}]", ds.stats.r_min, ds.stats.r_max);
    println!("episode returns from {worst:.2} to {best:.2}");
    println!("state scale {:?}, action scale {:?}", ds.stats.normalizer.state_scale, ds.stats.normalizer.action_scale);

    let dir = std::env::temp_dir().join("dmemm-example-dataset");
    let manifest = write_dataset(&ds, &dir, None)?;
    let back = read_dataset(&dir)?;
    println!("wrote {}, round trip exact: {}", manifest.display(), back == ds);
    Ok(())
}
