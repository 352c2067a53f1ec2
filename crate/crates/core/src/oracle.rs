//! Reference implementations used to check the main code paths: central finite
//! differences, step-by-step denoising, Monte-Carlo reverse-chain variance, and
//! exact/brute-force optimal control for the linear environment.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{reverse_mean, NoiseNet, NoiseSchedule, TrajTensor};
use crate::envs::{to_dvector, EnvSpec, LinearPointSpec};
use crate::error::{check_len, Error, Result};

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite around coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest coordinate error relative to the reference vector's largest magnitude.
pub fn max_rel_error(actual: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    actual
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

/// Applies the deterministic reverse mean `k` times starting from `tau_k`.
/// Returns the final trajectory and the iterates `tau^k, tau^{k-1}, ..., tau^1`
/// that the network was evaluated at.
pub fn iterative_denoise(
    sched: &NoiseSchedule,
    net: &NoiseNet,
    tau_k: &TrajTensor,
    k: usize,
) -> Result<(TrajTensor, Vec<TrajTensor>)> {
    sched.check_step(k)?;
    let mut iterates = Vec::with_capacity(k);
    let mut cur = tau_k.clone();
    for i in (1..=k).rev() {
        let next = reverse_mean(sched, net, &cur, i)?;
        iterates.push(cur);
        cur = next;
    }
    Ok((cur, iterates))
}

/// Per-cell sample variance of the stochastic reverse chain run from a fixed
/// `tau_k` down to step 0 with the noise prediction frozen to `eps_value`.
pub fn mc_reverse_variance(
    sched: &NoiseSchedule,
    eps_value: f64,
    tau_k: &[f64],
    k: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    sched.check_step(k)?;
    if n_samples < 2 {
        return Err(Error::config("Monte-Carlo variance needs at least two samples"));
    }
    const CHUNK: usize = 4096;
    let n_chunks = n_samples.div_ceil(CHUNK);
    let cells = tau_k.len();
    let samples: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c as u64));
            let count = CHUNK.min(n_samples - c * CHUNK);
            let mut out = Vec::with_capacity(count * cells);
            let mut x = vec![0.0; cells];
            for _ in 0..count {
                x.copy_from_slice(tau_k);
                for i in (1..=k).rev() {
                    let a = 1.0 - sched.beta(i);
                    let c_eps = sched.beta(i) / (1.0 - sched.alpha_bar(i)).sqrt();
                    let sigma = sched.sigma2(i).sqrt();
                    for v in x.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = (*v - c_eps * eps_value) / a.sqrt() + sigma * z;
                    }
                }
                out.extend_from_slice(&x);
            }
            out
        })
        .collect();
    let mut mean = vec![0.0; cells];
    for chunk in &samples {
        for row in chunk.chunks(cells) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_samples as f64);
    let mut var = vec![0.0; cells];
    for chunk in &samples {
        for row in chunk.chunks(cells) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
    }
    var.iter_mut().for_each(|s| *s /= (n_samples - 1) as f64);
    Ok(var)
}

/// Optimal open-loop solution of a noise-free linear environment.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSolution {
    pub actions: Vec<Vec<f64>>,
    pub total_return: f64,
}

fn linear_spec(spec: &EnvSpec) -> Result<&LinearPointSpec> {
    match spec {
        EnvSpec::LinearPoint(lp) => Ok(lp),
        _ => Err(Error::config("optimal-control oracles need a linear_point environment")),
    }
}

/// Finite-horizon Riccati recursion on the goal-shifted system, written in
/// homogeneous coordinates `[s; 1]` so the goal offset stays affine.
/// The return is the negated cost `sum_{t<T} (s_t-g)'Q(s_t-g) + a_t' Rw a_t`.
pub fn lqr_optimal(spec: &EnvSpec, s0: &[f64], horizon: usize) -> Result<ControlSolution> {
    let lp = linear_spec(spec)?;
    spec.validate()?;
    let (ds, da) = (lp.state_dim(), lp.action_dim());
    check_len("initial state", ds, s0.len())?;
    let n = ds + 1;
    let mut a = DMatrix::zeros(n, n);
    a.view_mut((0, 0), (ds, ds)).copy_from(&lp.a_matrix());
    a[(ds, ds)] = 1.0;
    let mut b = DMatrix::zeros(n, da);
    b.view_mut((0, 0), (ds, da)).copy_from(&lp.b_matrix());
    let q = lp.q_matrix();
    let g = to_dvector(&lp.goal);
    let qg = &q * &g;
    let mut qa = DMatrix::zeros(n, n);
    qa.view_mut((0, 0), (ds, ds)).copy_from(&q);
    for i in 0..ds {
        qa[(i, ds)] = -qg[i];
        qa[(ds, i)] = -qg[i];
    }
    qa[(ds, ds)] = g.dot(&qg);
    let rw = lp.rw_matrix();

    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut gains = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let lhs = &rw + b.transpose() * &p * &b;
        let chol = lhs
            .cholesky()
            .ok_or_else(|| Error::config("control cost matrix is not positive definite"))?;
        let k = chol.solve(&(b.transpose() * &p * &a));
        p = &qa + a.transpose() * &p * (&a - &b * &k);
        gains.push(k);
    }
    gains.reverse();

    let mut x = DVector::zeros(n);
    x.rows_mut(0, ds).copy_from(&to_dvector(s0));
    x[ds] = 1.0;
    let cost = x.dot(&(&p * &x));
    let actions = gains
        .iter()
        .map(|k| {
            let u = -(k * &x);
            x = &a * &x + &b * &u;
            u.iter().copied().collect()
        })
        .collect();
    Ok(ControlSolution {
        actions,
        total_return: -cost,
    })
}

/// Exhaustive search over a grid on the clipped action box, simulating the
/// environment directly. Intended for `horizon <= 3` and `action_dim <= 2`.
pub fn brute_force_actions(
    spec: &EnvSpec,
    s0: &[f64],
    horizon: usize,
    grid_step: f64,
) -> Result<ControlSolution> {
    let lp = linear_spec(spec)?;
    let (ds, da) = (lp.state_dim(), lp.action_dim());
    check_len("initial state", ds, s0.len())?;
    if horizon == 0 || horizon > 3 || da > 2 {
        return Err(Error::config("brute force supports horizon 1..=3 and action_dim <= 2"));
    }
    if !(grid_step > 0.0) {
        return Err(Error::config("grid step must be positive"));
    }
    let bound = lp.action_bound;
    let per_axis = (2.0 * bound / grid_step + 1e-9).floor() as usize + 1;
    let grid: Vec<f64> = (0..per_axis).map(|i| -bound + i as f64 * grid_step).collect();
    let per_step = grid.len().pow(da as u32);
    let total = (per_step as f64).powi(horizon as i32);
    if total > 1e8 {
        return Err(Error::config(format!(
            "brute-force budget exceeded: {total:.0} combinations"
        )));
    }
    let action_of = |mut idx: usize| -> Vec<f64> {
        (0..da)
            .map(|_| {
                let v = grid[idx % grid.len()];
                idx /= grid.len();
                v
            })
            .collect()
    };
    let step = |s: &[f64], a: &[f64]| -> Vec<f64> {
        (0..ds)
            .map(|i| {
                (0..ds).map(|j| lp.a[i][j] * s[j]).sum::<f64>()
                    + (0..da).map(|j| lp.b[i][j] * a[j]).sum::<f64>()
            })
            .collect()
    };
    let mut best = ControlSolution {
        actions: Vec::new(),
        total_return: f64::NEG_INFINITY,
    };
    for combo in 0..total as usize {
        let mut rest = combo;
        let mut s = s0.to_vec();
        let mut ret = 0.0;
        let mut actions = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let a = action_of(rest % per_step);
            rest /= per_step;
            ret += lp.reward(&s, &a);
            s = step(&s, &a);
            actions.push(a);
        }
        if ret > best.total_return {
            best = ControlSolution {
                actions,
                total_return: ret,
            };
        }
    }
    Ok(best)
}

/// One row of an oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub samples: usize,
}

impl OracleReport {
    pub fn new(name: impl Into<String>, max_rel_error: f64, tolerance: f64, samples: usize) -> Self {
        Self {
            name: name.into(),
            max_rel_error,
            tolerance,
            pass: max_rel_error <= tolerance,
            samples,
        }
    }
}

/// Appends rows to a CSV file, writing the header when the file is new or empty.
pub fn append_reports(path: &Path, reports: &[OracleReport]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in reports {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Convenience used by the examples: writes a single line to stdout.
pub fn print_report(r: &OracleReport) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{:<40} err={:.3e} tol={:.1e} n={} {}",
        r.name,
        r.max_rel_error,
        r.tolerance,
        r.samples,
        if r.pass { "PASS" } else { "FAIL" }
    );
}
