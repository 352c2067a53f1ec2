//! Runs the independent oracles against the diffusion and control code paths
//! and prints one report row per check.

use dmemm::diffusion::{
    accumulated_variance, closed_form_mean, denoised_estimate, forward_diffuse, make_schedule, NoiseNet,
    NoiseSchedule, ScheduleKind, TrajTensor,
};
use dmemm::envs::EnvSpec;
use dmemm::nn::{Activation, DenseNet, Precision};
use dmemm::oracle::{
    brute_force_actions, finite_diff, iterative_denoise, lqr_optimal, max_rel_error, mc_reverse_variance,
    print_report, OracleReport,
};

fn main() -> dmemm::Result<()> {
    let sched = make_schedule(ScheduleKind::Cosine, 6, 1e-4, 0.5)?;
    let net = NoiseNet::new(3, 1, 1, 6, &[8], Activation::Tanh, Precision::F64, 9)?;
    let tau = TrajTensor::from_vec(3, 1, 1, vec![0.5, -1.0, 0.2, 0.0, 1.5, -0.3])?;

    let (out, iterates) = iterative_denoise(&sched, &net, &tau, 6)?;
    let closed = closed_form_mean(&sched, &net, 6, &iterates)?;
    print_report(&OracleReport::new("closed-form vs iterative denoising", max_rel_error(closed.as_slice(), out.as_slice()), 1e-10, 1));

    let eps = TrajTensor::filled(3, 1, 1, 0.4);
    let est = denoised_estimate(&sched, &net, &tau, 1, &eps)?;
    let (one_step, _) = iterative_denoise(&sched, &net, &forward_diffuse(&sched, &tau, 1, &eps)?, 1)?;
    print_report(&OracleReport::new("denoised estimate at k = 1", max_rel_error(est.as_slice(), one_step.as_slice()), 1e-10, 1));

    let two = NoiseSchedule::from_betas(vec![0.1, 0.2])?;
    let mc = mc_reverse_variance(&two, 1.0, &[1.0], 2, 100_000, 7)?;
    let expected = accumulated_variance(&two, 2)?;
    print_report(&OracleReport::new("reverse-chain variance (Monte Carlo)", (mc[0] - expected).abs() / expected, 0.05, 100_000));

    let small = DenseNet::new(&[3, 5, 2], Activation::Gelu, Precision::F64, 3)?;
    let x = [0.3, -0.8, 1.1];
    let up = [1.0, -0.5];
    let (_, dx) = small.vjp(&x, &up)?;
    let fd = finite_diff(|v| small.forward(v).unwrap().iter().zip(&up).map(|(o, u)| o * u).sum(), &x, 1e-5)?;
    print_report(&OracleReport::new("network input gradient", max_rel_error(&dx, &fd), 1e-5, 1));

    let scalar: EnvSpec = toml::from_str(
        r#"
kind = "linear_point"
horizon = 2
a = [[1.0]]
b = [[1.0]]
goal = [0.0]
q = [[1.0]]
rw = [[1.0]]
start_low = [1.0]
start_high = [1.0]
expert_gain = [[0.5]]
"#,
    )
    .expect("valid spec");
    let riccati = lqr_optimal(&scalar, &[1.0], 2)?;
    let grid = brute_force_actions(&scalar, &[1.0], 2, 0.01)?;
    let gap = (riccati.total_return - grid.total_return).abs() / riccati.total_return.abs();
    print_report(&OracleReport::new("Riccati vs grid search", gap, 1e-3, 1));
    println!("optimal return {:.4}, first action {:.3}", riccati.total_return, riccati.actions[0][0]);
    Ok(())
}
