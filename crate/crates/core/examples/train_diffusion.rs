//! Trains the trajectory diffusion model with all three loss terms and prints
//! the training log.

use dmemm::cli::{fit_world_models, generate_dataset, train_checkpoint, RunConfig};

fn main() -> dmemm::Result<()> {
    let cfg = RunConfig::from_toml_str(
        r#"
[train]
steps = 1000
log_interval = 100
horizon = 4
diffusion_steps = 10
beta_end = 0.3
hidden = [64, 64]
"#,
    )?;
    let ds = generate_dataset(&cfg)?;
    let models = fit_world_models(&ds, &cfg)?;
    println!("step  total      wdiff     tr        rd");
    let (ckpt, _) = train_checkpoint(&ds, &models, &cfg, |r| {
        println!("{:>4}  {:>9.4}  {:>8.4}  {:>8.4}  {:>8.4}", r.step, r.loss_total, r.loss_wdiff, r.loss_tr, r.loss_rd);
    })?;
    println!("noise network parameters: {}", ckpt.noise_net.num_params());
    Ok(())
}
