//! Noise schedules, the forward and reverse diffusion kernels over trajectory
//! matrices, and the closed-form denoised trajectory used by the modulation
//! losses.
//!
//! Diffusion steps are 1-based throughout: `k` ranges over `1..=K`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, DenseNet, Precision, Tape};

/// A horizon-by-`(ds + da)` trajectory. Row `t` holds `(s_t, a_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajTensor {
    horizon: usize,
    state_dim: usize,
    action_dim: usize,
    data: Vec<f64>,
}

impl TrajTensor {
    pub fn zeros(horizon: usize, state_dim: usize, action_dim: usize) -> Self {
        Self {
            horizon,
            state_dim,
            action_dim,
            data: vec![0.0; horizon * (state_dim + action_dim)],
        }
    }

    pub fn from_vec(
        horizon: usize,
        state_dim: usize,
        action_dim: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        check_len("trajectory data", horizon * (state_dim + action_dim), data.len())?;
        Ok(Self {
            horizon,
            state_dim,
            action_dim,
            data,
        })
    }

    pub fn filled(horizon: usize, state_dim: usize, action_dim: usize, value: f64) -> Self {
        let mut t = Self::zeros(horizon, state_dim, action_dim);
        t.data.fill(value);
        t
    }

    /// Same shape, new contents.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(self.horizon, self.state_dim, self.action_dim, data)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Width of one row, `ds + da`.
    pub fn width(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &TrajTensor) -> bool {
        self.horizon == other.horizon
            && self.state_dim == other.state_dim
            && self.action_dim == other.action_dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.data[t * w..(t + 1) * w]
    }

    pub fn state(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.data[t * w..t * w + self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.data[t * w + self.state_dim..(t + 1) * w]
    }

    pub fn state_mut(&mut self, t: usize) -> &mut [f64] {
        let w = self.width();
        &mut self.data[t * w..t * w + self.state_dim]
    }

    pub fn action_mut(&mut self, t: usize) -> &mut [f64] {
        let w = self.width();
        let ds = self.state_dim;
        &mut self.data[t * w + ds..(t + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_shape(&self, other: &TrajTensor, context: &'static str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(context, self.len(), other.len()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    #[default]
    Cosine,
}

/// Variance schedule with derived products. Reverse variances are `sigma2_k = beta_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigma2: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    /// Linear: `beta_start..=beta_end` evenly spaced. Cosine: the squared-cosine
    /// `abar` profile, each `beta_k` clipped to at most `min(beta_end, 0.999)`.
    pub fn new(kind: ScheduleKind, n_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::config("the schedule needs at least one diffusion step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = match kind {
            ScheduleKind::Linear => (0..n_steps)
                .map(|i| {
                    if n_steps == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (n_steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    ((t / n_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                        * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                let cap = beta_end.min(MAX_BETA);
                (1..=n_steps)
                    .map(|k| (1.0 - f(k as f64) / f(k as f64 - 1.0)).clamp(1e-12, cap))
                    .collect()
            }
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::config("every beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            sigma2: betas.clone(),
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.n_steps() {
            Err(Error::StepRange {
                step: k,
                max: self.n_steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    pub fn sigma2(&self, k: usize) -> f64 {
        self.sigma2[k - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Weight of `eps_theta(tau^i, i)` in the closed-form denoised mean.
    pub fn denoise_coef(&self, i: usize) -> f64 {
        let ab = self.alpha_bar(i);
        (1.0 - self.alpha(i)) / ((1.0 - ab) * ab).sqrt()
    }
}

pub fn make_schedule(
    kind: ScheduleKind,
    n_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    NoiseSchedule::new(kind, n_steps, beta_start, beta_end)
}

const EMBED_FREQS: usize = 4;
/// Length of the diffusion-step embedding appended to the network input.
pub const STEP_EMBED_DIM: usize = 2 * EMBED_FREQS + 1;

/// `[sin(w_j k), cos(w_j k)]` for four fixed frequencies, then `k / K`.
pub fn step_embedding(k: usize, n_steps: usize) -> [f64; STEP_EMBED_DIM] {
    let mut out = [0.0; STEP_EMBED_DIM];
    let base = (n_steps.max(2)) as f64;
    for j in 0..EMBED_FREQS {
        let w = base.powf(-(j as f64) / EMBED_FREQS as f64);
        out[2 * j] = (w * k as f64).sin();
        out[2 * j + 1] = (w * k as f64).cos();
    }
    out[STEP_EMBED_DIM - 1] = k as f64 / n_steps as f64;
    out
}

/// Noise predictor over flattened trajectories plus a step embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseNet {
    net: DenseNet,
    horizon: usize,
    state_dim: usize,
    action_dim: usize,
    n_steps: usize,
}

impl NoiseNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        horizon: usize,
        state_dim: usize,
        action_dim: usize,
        n_steps: usize,
        hidden: &[usize],
        activation: Activation,
        precision: Precision,
        seed: u64,
    ) -> Result<Self> {
        let traj = horizon * (state_dim + action_dim);
        let mut sizes = vec![traj + STEP_EMBED_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(traj);
        let net = DenseNet::new(&sizes, activation, precision, seed)?;
        Self::from_net(net, horizon, state_dim, action_dim, n_steps)
    }

    pub fn from_net(
        net: DenseNet,
        horizon: usize,
        state_dim: usize,
        action_dim: usize,
        n_steps: usize,
    ) -> Result<Self> {
        if horizon < 2 {
            return Err(Error::config("trajectories need a horizon of at least 2"));
        }
        let traj = horizon * (state_dim + action_dim);
        check_len("noise network input", traj + STEP_EMBED_DIM, net.input_dim())?;
        check_len("noise network output", traj, net.output_dim())?;
        Ok(Self {
            net,
            horizon,
            state_dim,
            action_dim,
            n_steps,
        })
    }

    pub fn dense(&self) -> &DenseNet {
        &self.net
    }

    pub fn dense_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn check_traj(&self, tau: &TrajTensor) -> Result<()> {
        if tau.horizon() != self.horizon
            || tau.state_dim() != self.state_dim
            || tau.action_dim() != self.action_dim
        {
            return Err(Error::shape(
                "noise network trajectory",
                self.horizon * (self.state_dim + self.action_dim),
                tau.len(),
            ));
        }
        Ok(())
    }

    fn input(&self, tau: &TrajTensor, k: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(tau.len() + STEP_EMBED_DIM);
        x.extend_from_slice(tau.as_slice());
        x.extend_from_slice(&step_embedding(k, self.n_steps));
        x
    }

    /// `eps_theta(tau, k)`.
    pub fn predict(&self, tau: &TrajTensor, k: usize) -> Result<TrajTensor> {
        self.check_traj(tau)?;
        let out = self.net.forward(&self.input(tau, k))?;
        tau.with_data(out)
    }

    pub fn predict_tape(&self, tau: &TrajTensor, k: usize) -> Result<Tape> {
        self.check_traj(tau)?;
        self.net.forward_tape(&self.input(tau, k))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// trajectory part of the input.
    pub fn backward(&self, tape: &Tape, upstream: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        let mut dx = self.net.backward(tape, upstream, grads)?;
        dx.truncate(self.horizon * (self.state_dim + self.action_dim));
        Ok(dx)
    }
}

/// `tau^k = sqrt(abar_k) tau^0 + sqrt(1 - abar_k) eps`.
pub fn forward_diffuse(
    sched: &NoiseSchedule,
    tau0: &TrajTensor,
    k: usize,
    eps: &TrajTensor,
) -> Result<TrajTensor> {
    sched.check_step(k)?;
    tau0.check_shape(eps, "forward diffusion noise")?;
    let ab = sched.alpha_bar(k);
    let (c0, c1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = tau0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(x, e)| c0 * x + c1 * e)
        .collect();
    tau0.with_data(data)
}

/// One forward kernel `q(tau^k | tau^{k-1}) = N(sqrt(alpha_k) tau^{k-1}, beta_k I)`,
/// sampled with standard-normal `z`.
pub fn forward_kernel_step(
    sched: &NoiseSchedule,
    prev: &TrajTensor,
    k: usize,
    z: &TrajTensor,
) -> Result<TrajTensor> {
    sched.check_step(k)?;
    prev.check_shape(z, "forward kernel noise")?;
    let (c0, c1) = (sched.alpha(k).sqrt(), sched.beta(k).sqrt());
    let data = prev
        .as_slice()
        .iter()
        .zip(z.as_slice())
        .map(|(x, e)| c0 * x + c1 * e)
        .collect();
    prev.with_data(data)
}

/// Reverse-process mean from a given noise prediction.
pub fn reverse_mean_from_eps(
    sched: &NoiseSchedule,
    tau_k: &TrajTensor,
    k: usize,
    eps_hat: &TrajTensor,
) -> Result<TrajTensor> {
    sched.check_step(k)?;
    tau_k.check_shape(eps_hat, "noise prediction")?;
    let a = sched.alpha(k);
    let inv_sqrt_a = 1.0 / a.sqrt();
    let c = (1.0 - a) / (1.0 - sched.alpha_bar(k)).sqrt();
    let data = tau_k
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .map(|(x, e)| inv_sqrt_a * (x - c * e))
        .collect();
    tau_k.with_data(data)
}

/// `mu_theta(tau^k, k) = (tau^k - (1 - alpha_k) / sqrt(1 - abar_k) eps_theta) / sqrt(alpha_k)`.
pub fn reverse_mean(
    sched: &NoiseSchedule,
    net: &NoiseNet,
    tau_k: &TrajTensor,
    k: usize,
) -> Result<TrajTensor> {
    sched.check_step(k)?;
    let eps_hat = net.predict(tau_k, k)?;
    reverse_mean_from_eps(sched, tau_k, k, &eps_hat)
}

/// `mu + sigma_k z`; `z = None` gives the deterministic mean.
pub fn reverse_step(
    sched: &NoiseSchedule,
    net: &NoiseNet,
    tau_k: &TrajTensor,
    k: usize,
    z: Option<&TrajTensor>,
) -> Result<TrajTensor> {
    let mut mu = reverse_mean(sched, net, tau_k, k)?;
    if let Some(z) = z {
        add_scaled_noise(&mut mu, z, sched.sigma2(k).sqrt())?;
    }
    Ok(mu)
}

pub(crate) fn add_scaled_noise(target: &mut TrajTensor, z: &TrajTensor, scale: f64) -> Result<()> {
    target.check_shape(z, "reverse noise")?;
    for (v, e) in target.as_mut_slice().iter_mut().zip(z.as_slice()) {
        *v += scale * e;
    }
    Ok(())
}

/// `sigma_1^2 + sum_{i=2..k} sigma_i^2 / abar_{i-1}`.
pub fn accumulated_variance(sched: &NoiseSchedule, k: usize) -> Result<f64> {
    sched.check_step(k)?;
    Ok(sched.sigma2(1) + (2..=k).map(|i| sched.sigma2(i) / sched.alpha_bar(i - 1)).sum::<f64>())
}

/// Which noise-network evaluations of the denoised estimate receive gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientFlow {
    /// Through every `eps_theta(tau^i, i)`, `i = 1..=k`.
    #[default]
    Full,
    /// Only through the outermost evaluation at step `k`.
    LastStepOnly,
}

/// One recorded `eps_theta(tau^i, i)` evaluation inside the denoised estimate.
#[derive(Debug, Clone)]
pub struct DenoiseTerm {
    pub step: usize,
    pub coef: f64,
    pub tape: Tape,
}

/// The closed-form denoised trajectory with the tapes needed for its gradient.
#[derive(Debug, Clone)]
pub struct DenoisedEstimate {
    pub value: TrajTensor,
    /// Evaluations ordered by step `1..=k`.
    pub terms: Vec<DenoiseTerm>,
}

impl DenoisedEstimate {
    /// Noise prediction at step `i` (as recorded).
    pub fn prediction(&self, i: usize) -> &[f64] {
        self.terms[i - 1].tape.output()
    }

    /// Pulls an upstream gradient on the estimate back into parameter gradients.
    pub fn backward(
        &self,
        net: &NoiseNet,
        upstream: &[f64],
        flow: GradientFlow,
        grads: &mut [f64],
    ) -> Result<()> {
        check_len("denoised estimate upstream", self.value.len(), upstream.len())?;
        let k = self.terms.len();
        for term in &self.terms {
            if flow == GradientFlow::LastStepOnly && term.step != k {
                continue;
            }
            let up: Vec<f64> = upstream.iter().map(|u| -term.coef * u).collect();
            net.backward(&term.tape, &up, grads)?;
        }
        Ok(())
    }
}

/// Denoised trajectory from a clean trajectory and a shared noise draw:
///
/// `tau0 + sqrt((1 - abar_k) / abar_k) eps - sum_i c_i eps_theta(sqrt(abar_i) tau0 + sqrt(1 - abar_i) eps, i)`
/// with `c_i = (1 - alpha_i) / sqrt((1 - abar_i) abar_i)`.
pub fn denoised_estimate(
    sched: &NoiseSchedule,
    net: &NoiseNet,
    tau0: &TrajTensor,
    k: usize,
    eps: &TrajTensor,
) -> Result<TrajTensor> {
    Ok(denoised_estimate_tape(sched, net, tau0, k, eps)?.value)
}

pub fn denoised_estimate_tape(
    sched: &NoiseSchedule,
    net: &NoiseNet,
    tau0: &TrajTensor,
    k: usize,
    eps: &TrajTensor,
) -> Result<DenoisedEstimate> {
    sched.check_step(k)?;
    tau0.check_shape(eps, "denoised estimate noise")?;
    let ab = sched.alpha_bar(k);
    let c_eps = ((1.0 - ab) / ab).sqrt();
    let mut value: Vec<f64> = tau0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(x, e)| x + c_eps * e)
        .collect();
    let mut terms = Vec::with_capacity(k);
    for i in 1..=k {
        let tau_i = forward_diffuse(sched, tau0, i, eps)?;
        let tape = net.predict_tape(&tau_i, i)?;
        let coef = sched.denoise_coef(i);
        for (v, e) in value.iter_mut().zip(tape.output()) {
            *v -= coef * e;
        }
        terms.push(DenoiseTerm {
            step: i,
            coef,
            tape,
        });
    }
    Ok(DenoisedEstimate {
        value: tau0.with_data(value)?,
        terms,
    })
}

/// Closed-form mean `tau^k / sqrt(abar_k) - sum_i c_i eps_theta(tau^i, i)` with
/// `eps_theta` evaluated at supplied intermediate trajectories.
///
/// `iterates[j]` is `tau^{k-j}` for `j = 0..k`.
pub fn closed_form_mean(
    sched: &NoiseSchedule,
    net: &NoiseNet,
    k: usize,
    iterates: &[TrajTensor],
) -> Result<TrajTensor> {
    sched.check_step(k)?;
    check_len("recorded iterates", k, iterates.len())?;
    let tau_k = &iterates[0];
    let scale = 1.0 / sched.alpha_bar(k).sqrt();
    let mut value: Vec<f64> = tau_k.as_slice().iter().map(|x| scale * x).collect();
    for (j, tau_i) in iterates.iter().enumerate() {
        let i = k - j;
        let eps_hat = net.predict(tau_i, i)?;
        let coef = sched.denoise_coef(i);
        for (v, e) in value.iter_mut().zip(eps_hat.as_slice()) {
            *v -= coef * e;
        }
    }
    tau_k.with_data(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_diff, iterative_denoise};

    fn sched2() -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap()
    }

    /// Noise net on a 2x(1+0) trajectory whose output ignores its input.
    fn constant_net(value: f64, horizon: usize, k: usize) -> NoiseNet {
        let traj = horizon;
        let sizes = [traj + STEP_EMBED_DIM, traj];
        let mut params = vec![0.0; (traj + STEP_EMBED_DIM) * traj + traj];
        for b in params.iter_mut().skip((traj + STEP_EMBED_DIM) * traj) {
            *b = value;
        }
        let net = DenseNet::from_params(&sizes, Activation::Tanh, Precision::F64, params).unwrap();
        NoiseNet::from_net(net, horizon, 1, 0, k).unwrap()
    }

    fn ones(h: usize) -> TrajTensor {
        TrajTensor::filled(h, 1, 0, 1.0)
    }

    #[test]
    fn schedule_products() {
        let s = sched2();
        assert!((s.alpha(1) - 0.9).abs() < 1e-15 && (s.alpha(2) - 0.8).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        let lin = make_schedule(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap();
        assert_eq!(lin.betas(), &[0.1, 0.2]);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(ScheduleKind::Linear, 1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.sigma2(1), 0.5);
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for k in [1, 2, 8, 32, 100] {
                let s = make_schedule(kind, k, 1e-4, 0.2).unwrap();
                let ab = s.alpha_bars();
                assert!(ab[0] < 1.0);
                assert!(ab.windows(2).all(|w| w[1] < w[0]), "{kind:?} {k}");
                assert!((1..=k).all(|i| s.sigma2(i) > 0.0));
            }
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(make_schedule(ScheduleKind::Linear, 0, 0.1, 0.2).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 4, 0.0, 0.2).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 4, 0.3, 0.2).is_err());
        assert!(make_schedule(ScheduleKind::Cosine, 4, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_values() {
        let s = sched2();
        let t = forward_diffuse(&s, &ones(2), 2, &TrajTensor::zeros(2, 1, 0)).unwrap();
        assert!((t.as_slice()[0] - 0.848_528_137_423_857).abs() < 1e-12);
        let t = forward_diffuse(&s, &ones(2), 1, &ones(2)).unwrap();
        assert!((t.as_slice()[0] - 1.264_911_064_067_352).abs() < 1e-12);
        assert!(matches!(
            forward_diffuse(&s, &ones(2), 3, &ones(2)),
            Err(Error::StepRange { step: 3, max: 2 })
        ));
        assert!(forward_diffuse(&s, &ones(2), 0, &ones(2)).is_err());
    }

    #[test]
    fn forward_diffuse_approaches_noise_at_the_end() {
        let s = make_schedule(ScheduleKind::Cosine, 100, 1e-4, 0.999).unwrap();
        let eps = TrajTensor::filled(2, 1, 0, 0.7);
        let t = forward_diffuse(&s, &ones(2), 100, &eps).unwrap();
        assert!((t.as_slice()[0] - 0.7).abs() < 1e-3);
    }

    #[test]
    fn reverse_mean_values() {
        let s = sched2();
        let zero = constant_net(0.0, 2, 2);
        let mu = reverse_mean(&s, &zero, &ones(2), 2).unwrap();
        assert!((mu.as_slice()[0] - 1.118_033_988_749_895).abs() < 1e-12);
        let one = constant_net(1.0, 2, 2);
        let mu = reverse_mean(&s, &one, &ones(2), 1).unwrap();
        assert!((mu.as_slice()[0] - 0.720_759_220_056_126_5).abs() < 1e-12);
    }

    #[test]
    fn reverse_mean_linear_in_tau_for_linear_net() {
        let s = sched2();
        let net = NoiseNet::new(3, 1, 1, 2, &[], Activation::Tanh, Precision::F64, 4).unwrap();
        // zero out the bias so the network is linear in its input
        let n = net.dense().num_params();
        let mut params = net.dense().params().to_vec();
        for b in params[n - 6..].iter_mut() {
            *b = 0.0;
        }
        let dense =
            DenseNet::from_params(net.dense().layer_sizes(), Activation::Tanh, Precision::F64, params)
                .unwrap();
        let net = NoiseNet::from_net(dense, 3, 1, 1, 2).unwrap();
        let x = TrajTensor::from_vec(3, 1, 1, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let y = TrajTensor::from_vec(3, 1, 1, vec![1.0, -1.0, 0.5, 0.0, 0.25, 2.0]).unwrap();
        let sum = x.with_data(x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a + b).collect()).unwrap();
        let zero = TrajTensor::zeros(3, 1, 1);
        // mu(x + y) - mu(0) = (mu(x) - mu(0)) + (mu(y) - mu(0))
        let m = |t: &TrajTensor| reverse_mean(&s, &net, t, 2).unwrap().into_vec();
        let (mx, my, ms, m0) = (m(&x), m(&y), m(&sum), m(&zero));
        for i in 0..6 {
            assert!(((ms[i] - m0[i]) - (mx[i] - m0[i]) - (my[i] - m0[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_step_zero_noise_is_the_mean() {
        let s = sched2();
        let net = NoiseNet::new(2, 1, 1, 2, &[6], Activation::Tanh, Precision::F64, 1).unwrap();
        let tau = TrajTensor::from_vec(2, 1, 1, vec![0.3, -0.2, 0.1, 0.9]).unwrap();
        let mu = reverse_mean(&s, &net, &tau, 2).unwrap();
        assert_eq!(reverse_step(&s, &net, &tau, 2, None).unwrap(), mu);
        let z = TrajTensor::zeros(2, 1, 1);
        assert_eq!(reverse_step(&s, &net, &tau, 2, Some(&z)).unwrap(), mu);
        let z = TrajTensor::filled(2, 1, 1, 0.5);
        let a = reverse_step(&s, &net, &tau, 2, Some(&z)).unwrap();
        let b = reverse_step(&s, &net, &tau, 2, Some(&z)).unwrap();
        assert_eq!(a, b);
        assert!((a.as_slice()[0] - mu.as_slice()[0] - 0.2f64.sqrt() * 0.5).abs() < 1e-12);
    }

    #[test]
    fn denoised_estimate_zero_net_zero_noise_is_identity() {
        let s = make_schedule(ScheduleKind::Cosine, 8, 1e-4, 0.5).unwrap();
        let net = constant_net(0.0, 3, 8);
        let tau0 = TrajTensor::from_vec(3, 1, 0, vec![0.2, -0.7, 1.3]).unwrap();
        for k in 1..=8 {
            let est = denoised_estimate(&s, &net, &tau0, k, &TrajTensor::zeros(3, 1, 0)).unwrap();
            assert_eq!(est, tau0);
        }
    }

    #[test]
    fn denoised_estimate_single_term() {
        let s = sched2();
        let net = NoiseNet::new(2, 1, 1, 2, &[5], Activation::Gelu, Precision::F64, 2).unwrap();
        let tau0 = TrajTensor::from_vec(2, 1, 1, vec![0.4, -0.1, 0.2, 0.3]).unwrap();
        let eps = TrajTensor::from_vec(2, 1, 1, vec![1.0, 0.5, -0.5, 0.25]).unwrap();
        let est = denoised_estimate(&s, &net, &tau0, 1, &eps).unwrap();
        let tau1 = forward_diffuse(&s, &tau0, 1, &eps).unwrap();
        let e1 = net.predict(&tau1, 1).unwrap();
        let c0 = (0.1f64 / 0.9).sqrt();
        let c1 = 0.1 / (0.1f64 * 0.9).sqrt();
        for i in 0..4 {
            let expected = tau0.as_slice()[i] + c0 * eps.as_slice()[i] - c1 * e1.as_slice()[i];
            assert!((est.as_slice()[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn denoised_estimate_constant_net_matches_hand_value_and_iterative_oracle() {
        let s = sched2();
        let net = constant_net(1.0, 2, 2);
        let zero = TrajTensor::zeros(2, 1, 0);
        let est = denoised_estimate(&s, &net, &ones(2), 2, &zero).unwrap();
        // 1 - (0.1 / 0.3 + 0.2 / sqrt(0.28 * 0.72))
        let expected = 1.0 - (0.1 / 0.3 + 0.2 / (0.28f64 * 0.72).sqrt());
        assert!((est.as_slice()[0] - expected).abs() < 1e-12);
        assert!((est.as_slice()[0] - 0.221_231_263_479_292_6).abs() < 1e-12);
        let tau2 = forward_diffuse(&s, &ones(2), 2, &zero).unwrap();
        let (oracle, _) = iterative_denoise(&s, &net, &tau2, 2).unwrap();
        for (a, b) in est.as_slice().iter().zip(oracle.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulated_variance_values() {
        let s = sched2();
        assert_eq!(accumulated_variance(&s, 1).unwrap(), 0.1);
        assert!((accumulated_variance(&s, 2).unwrap() - 0.322_222_222_222_222_2).abs() < 1e-12);
        assert!(accumulated_variance(&s, 3).is_err());
    }

    #[test]
    fn closed_form_mean_matches_iterates() {
        let s = make_schedule(ScheduleKind::Cosine, 6, 1e-4, 0.5).unwrap();
        let net = NoiseNet::new(3, 1, 1, 6, &[8], Activation::Tanh, Precision::F64, 9).unwrap();
        let tau = TrajTensor::from_vec(3, 1, 1, vec![0.5, -1.0, 0.2, 0.0, 1.5, -0.3]).unwrap();
        let (out, iterates) = iterative_denoise(&s, &net, &tau, 6).unwrap();
        let closed = closed_form_mean(&s, &net, 6, &iterates).unwrap();
        for (a, b) in closed.as_slice().iter().zip(out.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn denoised_estimate_parameter_gradient_matches_finite_differences() {
        let s = make_schedule(ScheduleKind::Cosine, 4, 1e-4, 0.5).unwrap();
        let net = NoiseNet::new(2, 1, 1, 4, &[6], Activation::Tanh, Precision::F64, 21).unwrap();
        let tau0 = TrajTensor::from_vec(2, 1, 1, vec![0.3, -0.4, 0.8, 0.1]).unwrap();
        let eps = TrajTensor::from_vec(2, 1, 1, vec![-0.2, 1.1, 0.6, -0.9]).unwrap();
        let up = [0.7, -0.3, 0.2, 1.0];
        let est = denoised_estimate_tape(&s, &net, &tau0, 3, &eps).unwrap();
        let mut grads = vec![0.0; net.num_params()];
        est.backward(&net, &up, GradientFlow::Full, &mut grads).unwrap();
        let sizes = net.dense().layer_sizes().to_vec();
        let fd = finite_diff(
            |p| {
                let d = DenseNet::from_params(&sizes, Activation::Tanh, Precision::F64, p.to_vec())
                    .unwrap();
                let n = NoiseNet::from_net(d, 2, 1, 1, 4).unwrap();
                let v = denoised_estimate(&s, &n, &tau0, 3, &eps).unwrap();
                v.as_slice().iter().zip(&up).map(|(a, b)| a * b).sum()
            },
            net.dense().params(),
            1e-5,
        )
        .unwrap();
        for (a, b) in grads.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn shapes_are_preserved() {
        let s = sched2();
        let net = NoiseNet::new(4, 2, 1, 2, &[7], Activation::Relu, Precision::F64, 3).unwrap();
        let tau = TrajTensor::filled(4, 2, 1, 0.1);
        for out in [
            forward_diffuse(&s, &tau, 1, &tau).unwrap(),
            reverse_mean(&s, &net, &tau, 2).unwrap(),
            reverse_step(&s, &net, &tau, 1, Some(&tau)).unwrap(),
            denoised_estimate(&s, &net, &tau, 2, &tau).unwrap(),
        ] {
            assert!(out.same_shape(&tau));
        }
        let wrong = TrajTensor::filled(3, 2, 1, 0.1);
        assert!(net.predict(&wrong, 1).is_err());
    }

    #[test]
    fn step_embedding_layout() {
        let e = step_embedding(3, 8);
        assert_eq!(e.len(), STEP_EMBED_DIM);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e[1] - 3f64.cos()).abs() < 1e-15);
        assert_eq!(e[8], 3.0 / 8.0);
    }
}
